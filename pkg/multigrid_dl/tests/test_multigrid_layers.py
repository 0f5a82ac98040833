import numpy as np
import pytest

from multigrid_dl import tensor_core as tc
from multigrid_dl import multigrid_layers as ml
from multigrid_dl.errors import PyramidError


def random_pyramid(rng, channels=(4, 2, 1), size=8, n=2):
    return ml.Pyramid(tc.Tensor(rng.normal(size=(n, c, size >> level, size >> level)))
                      for level, c in enumerate(channels))


def test_pyramid_properties(rng):
    p = random_pyramid(rng)
    assert p.levels == 3
    assert p.channels == (4, 2, 1)
    assert p.sizes == ((8, 8), (4, 4), (2, 2))
    assert p.truncate(2).channels == (4, 2)


def test_pyramid_rejects_non_dyadic(rng):
    with pytest.raises(PyramidError) as info:
        ml.Pyramid([tc.Tensor(np.zeros((1, 1, 8, 8))), tc.Tensor(np.zeros((1, 1, 3, 3)))])
    assert info.value.level == 1
    with pytest.raises(PyramidError):
        ml.Pyramid([])


def test_halving_plan():
    assert ml.halving_plan(32, 3) == (32, 16, 8)
    assert ml.halving_plan(2, 4) == (2, 1, 1, 1)


def test_gather_order(rng):
    p = random_pyramid(rng)
    middle = ml.gather(p, 1)
    expected = np.concatenate([tc.maxpool2x(p[0]).data, p[1].data, tc.upsample_nearest2x(p[2]).data], axis=1)
    assert np.array_equal(middle.data, expected)
    assert ml.gather(p, 0).shape[1] == 4 + 2
    assert ml.gather(p, 2).shape[1] == 2 + 1


def test_mg_conv_matches_composition(rng):
    p = random_pyramid(rng)
    weights = ml.MgConvWeights.init(rng, p.channels, (6, 3, 2))
    out = ml.mg_conv(p, weights)
    assert out.channels == (6, 3, 2)
    assert out.sizes == p.sizes
    for level, conv in enumerate(weights.convs):
        parts = []
        if level > 0:
            parts.append(tc.maxpool2x(p[level - 1]))
        parts.append(p[level])
        if level < 2:
            parts.append(tc.upsample_nearest2x(p[level + 1]))
        expected = tc.conv2d(tc.concat_channels(parts), conv.w, conv.b, pad=1)
        assert np.array_equal(out[level].data, expected.data)


def test_single_level_mg_conv_is_conv2d(rng):
    p = random_pyramid(rng, channels=(3,))
    weights = ml.MgConvWeights.init(rng, (3,), (5,))
    out = ml.mg_conv(p, weights)
    expected = tc.conv2d(p[0], weights.convs[0].w, weights.convs[0].b)
    assert np.array_equal(out[0].data, expected.data)


def test_mg_conv_fewer_output_levels(rng):
    p = random_pyramid(rng)
    weights = ml.MgConvWeights.init(rng, p.channels, (4,))
    out = ml.mg_conv(p, weights)
    assert out.levels == 1
    assert weights.convs[0].c_in == 4 + 2


def test_mg_conv_channel_mismatch(rng):
    weights = ml.MgConvWeights.init(rng, (4, 2, 1), (4, 2, 1))
    with pytest.raises(PyramidError) as info:
        ml.mg_conv(random_pyramid(rng, channels=(4, 3, 1)), weights)
    assert info.value.level == 0


def test_mg_conv_weight_names(rng):
    weights = ml.MgConvWeights.init(rng, (4, 2), (4, 2))
    names = [name for name, _ in weights.named_parameters("mgconv.3")]
    assert names == ["mgconv.3.0.w", "mgconv.3.0.b", "mgconv.3.1.w", "mgconv.3.1.b"]


def test_grad_check_mg_stack(rng):
    stems = [ml.ConvWeights.init(rng, 1, c) for c in (4, 2, 1)]
    first = ml.MgConvWeights.init(rng, (4, 2, 1), (4, 2, 1))
    second = ml.MgConvWeights.init(rng, (4, 2, 1), (2, 1, 1))

    def f(x):
        p = ml.mg_conv(ml.mg_conv(ml.build_input_pyramid(x, 3, stems), first), second)
        total = tc.tensor_sum(tc.sigmoid(p[0]))
        for grid in p.grids[1:]:
            total = tc.add(total, tc.tensor_sum(tc.sigmoid(grid)))
        return total

    x = tc.Tensor(rng.normal(size=(2, 1, 8, 8)))
    assert tc.grad_check(f, x) < 1e-4


def test_residual_unit_identity_shortcut(rng):
    p = random_pyramid(rng, channels=(4, 2))
    weights = ml.ResUnitWeights.init(rng, (4, 2), (4, 2))
    assert weights.projection is None
    for conv in weights.conv2.convs:
        conv.w.data[...] = 0.0
        conv.b.data[...] = 0.0
    out = ml.res_mg_unit(p, weights, train=True)
    for a, b in zip(out, p):
        assert np.array_equal(a.data, b.data)


def test_residual_unit_zero_weights_pass_gradient_through(rng):
    p = ml.Pyramid(tc.Tensor(rng.normal(size=(2, c, 8 >> level, 8 >> level)), requires_grad=True)
                   for level, c in enumerate((4, 2)))
    weights = ml.ResUnitWeights.init(rng, (4, 2), (4, 2))
    for conv in weights.conv1.convs + weights.conv2.convs:
        conv.w.data[...] = 0.0
    with tc.Tape() as tape:
        out = ml.res_mg_unit(p, weights, train=True)
        total = tc.add(tc.tensor_sum(out[0]), tc.tensor_sum(out[1]))
        tape.backward(total)
    for grid in p:
        assert np.array_equal(grid.grad, np.ones_like(grid.data))


def test_residual_unit_projection(rng):
    p = random_pyramid(rng, channels=(4, 2, 1))
    weights = ml.ResUnitWeights.init(rng, (4, 2, 1), (8, 4))
    assert len(weights.projection) == 2
    out = ml.res_mg_unit(p, weights, train=False)
    assert out.channels == (8, 4)
    names = [name for name, _ in weights.named_parameters(5)]
    assert "bn.5.2.gamma" in names
    assert "mgconv.6.1.w" in names
    assert "proj.5.0.w" in names


def test_pyramid_pool_drops_unpoolable(rng):
    p = ml.Pyramid(tc.Tensor(rng.normal(size=(1, 1, s, s))) for s in (4, 2, 1))
    pooled = ml.pyramid_pool(p)
    assert pooled.sizes == ((2, 2), (1, 1))
    with pytest.raises(PyramidError):
        ml.pyramid_pool(ml.Pyramid([tc.Tensor(np.zeros((1, 1, 3, 3)))]))


def test_input_pyramid(rng):
    image = tc.Tensor(rng.normal(size=(2, 3, 8, 8)))
    raw = ml.downsample_inputs(image, 3)
    assert [g.shape[2:] for g in raw] == [(8, 8), (4, 4), (2, 2)]
    np.testing.assert_allclose(raw[2].data[0, 0, 0, 0], image.data[0, 0, :4, :4].mean())
    stems = [ml.ConvWeights.init(rng, 3, c) for c in (8, 4, 2)]
    p = ml.build_input_pyramid(image, 3, stems)
    assert p.channels == (8, 4, 2)
    with pytest.raises(PyramidError):
        ml.downsample_inputs(tc.Tensor(np.zeros((1, 1, 6, 6))), 3)


def test_concat_pyramids_passes_extra_levels(rng):
    a = random_pyramid(rng, channels=(2, 1))
    b = random_pyramid(rng, channels=(3, 3, 3))
    merged = ml.concat_pyramids(a, b)
    assert merged.channels == (5, 4, 3)
    assert merged[2] is b[2]


def test_upsample_pyramid(rng):
    p = random_pyramid(rng, channels=(2, 1), size=4)
    assert ml.upsample_pyramid(p).sizes == ((8, 8), (4, 4))
