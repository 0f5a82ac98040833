import gzip
import struct

import numpy as np
import pytest

from multigrid_dl import data_synth as ds
from multigrid_dl.errors import FormatError

small_cfg = ds.GenConfig(seed=7, train_count=12, test_count=4)


def write_idx(tmp_path, images, labels, compress=False):
    image_bytes = struct.pack(">IIII", ds.IMAGE_MAGIC, *images.shape) + images.astype(np.uint8).tobytes()
    label_bytes = struct.pack(">II", ds.LABEL_MAGIC, len(labels)) + labels.astype(np.uint8).tobytes()
    suffix = ".gz" if compress else ""
    images_path = tmp_path / f"images-idx3-ubyte{suffix}"
    labels_path = tmp_path / f"labels-idx1-ubyte{suffix}"
    opener = gzip.open if compress else open
    with opener(images_path, "wb") as f:
        f.write(image_bytes)
    with opener(labels_path, "wb") as f:
        f.write(label_bytes)
    return images_path, labels_path


@pytest.mark.parametrize("compress", [False, True])
def test_load_mnist_idx(tmp_path, compress):
    images = np.arange(2 * 4 * 3).reshape(2, 4, 3) * 10
    paths = write_idx(tmp_path, images, np.array([3, 8]), compress)
    loaded, labels = ds.load_mnist_idx(*paths)
    assert loaded.shape == (2, 4, 3)
    np.testing.assert_allclose(loaded, images / 255.0)
    assert labels.tolist() == [3, 8]


def test_truncated_idx(tmp_path):
    images_path, labels_path = write_idx(tmp_path, np.zeros((2, 4, 4)), np.array([1, 2]))
    raw = images_path.read_bytes()
    images_path.write_bytes(raw[:-5])
    with pytest.raises(FormatError) as info:
        ds.load_mnist_idx(images_path, labels_path)
    assert info.value.expected == 16 + 2 * 4 * 4
    assert info.value.actual == 16 + 2 * 4 * 4 - 5


def test_idx_bad_magic(tmp_path):
    images_path, labels_path = write_idx(tmp_path, np.zeros((1, 2, 2)), np.array([1]))
    with pytest.raises(FormatError) as info:
        ds.load_mnist_idx(images_path, images_path)
    assert info.value.offset == 0


def test_bank_from_mnist_limit(tmp_path):
    paths = write_idx(tmp_path, np.full((5, 6, 6), 255), np.arange(5))
    bank = ds.bank_from_mnist(*paths, limit=3)
    assert len(bank) == 3
    np.testing.assert_allclose(bank.centroids[0], [2.5, 2.5])


def test_sample_streams_are_independent_of_order(digit_bank):
    samples = ds.gen_seg_dataset(small_cfg, digit_bank, "train")
    direct = ds.make_seg_sample(digit_bank, small_cfg, "seg/train", 9)
    assert np.array_equal(samples[9].image, direct.image)
    assert np.array_equal(samples[9].labels, direct.labels)
    other = ds.make_seg_sample(digit_bank, small_cfg, "seg/test", 9)
    assert not np.array_equal(other.image, direct.image)


def test_seg_samples_respect_invariants(digit_bank):
    samples = ds.gen_seg_dataset(small_cfg, digit_bank, "train")
    for s in samples:
        assert s.image.shape == (1, 64, 64)
        assert s.labels.shape == (64, 64)
        assert s.labels.max() <= ds.BACKGROUND
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert len(s.classes) <= 5
        assert set(np.unique(s.labels)) <= set(s.classes) | {ds.BACKGROUND}
    audit = ds.audit_seg_dataset(samples, small_cfg)
    assert audit["overlap_ok"]
    assert audit["max_overlap"] <= 0.30
    assert audit["label_mismatches"] == 0


def test_seg_generation_is_deterministic(digit_bank):
    first = ds.gen_seg_dataset(small_cfg, digit_bank, "test")
    second = ds.gen_seg_dataset(small_cfg, digit_bank, "test")
    assert ds.dataset_digest(first) == ds.dataset_digest(second)


def test_parallel_generation_matches_serial(digit_bank):
    parallel = ds.GenConfig(seed=7, train_count=12, test_count=4, workers=2)
    assert ds.dataset_digest(ds.gen_seg_dataset(parallel, digit_bank, "test")) == \
        ds.dataset_digest(ds.gen_seg_dataset(small_cfg, digit_bank, "test"))


def test_spt_targets_are_centred(digit_bank):
    cfg = ds.spt_gen_config(seed=3, train_count=6, test_count=2)
    samples = ds.gen_spt_dataset(cfg, digit_bank, "train")
    for s in samples:
        assert s.image.shape == s.target.shape == (1, 64, 64)
        assert 0 <= s.label <= 9
    assert ds.audit_spt_dataset(samples, cfg)["max_centroid_offset"] < 1e-3


def test_spt_identity_without_translation(digit_bank):
    cfg = ds.spt_gen_config(seed=2, train_count=5, test_count=1, scale=(1.0, 1.0), rotation=(0.0, 0.0),
                            shear=(0.0, 0.0), translate=False, canvas=32)
    for s in ds.gen_spt_dataset(cfg, digit_bank, "train"):
        assert s.image.any()
        np.testing.assert_array_equal(s.image, s.target)


def test_spt_shear_distribution():
    cfg = ds.spt_gen_config()
    rng = np.random.default_rng(0)
    shears = np.array([ds.draw_affine(rng, cfg)[2] for _ in range(10000)])
    assert -60 < shears.min() and shears.max() < 60
    assert abs(shears.mean()) < 2


def test_affine_matrix():
    np.testing.assert_allclose(ds.affine_matrix(1.0, 0.0, 0.0), np.eye(2))
    np.testing.assert_allclose(ds.affine_matrix(2.0, 90.0, 0.0) @ [1.0, 0.0], [0.0, 2.0], atol=1e-12)


def test_foreground_overlap():
    a = np.zeros((4, 4), dtype=bool)
    b = np.zeros((4, 4), dtype=bool)
    a[:2] = True
    b[1:] = True
    assert ds.foreground_overlap(a, b) == pytest.approx(0.5)
    assert ds.foreground_overlap(a, np.zeros((4, 4), dtype=bool)) == 0.0


def test_samples_archive_round_trip(tmp_path, digit_bank):
    samples = ds.gen_seg_dataset(small_cfg, digit_bank, "test")
    path = tmp_path / "seg_test.mgd"
    ds.save_samples(path, samples)
    back = ds.load_samples(path)
    assert ds.dataset_digest(back) == ds.dataset_digest(samples)
    spt = ds.gen_spt_dataset(ds.spt_gen_config(seed=1, test_count=2), digit_bank, "test")
    ds.save_samples(path, spt)
    assert [s.label for s in ds.load_samples(path)] == [s.label for s in spt]


def test_to_array_dataset(digit_bank):
    data = ds.to_array_dataset(ds.gen_seg_dataset(small_cfg, digit_bank, "test"))
    assert data.task == "seg"
    assert data.inputs.shape == (4, 1, 64, 64)
    assert data.targets.dtype == np.int64
    x, y = data.batch([0, 0, 3])
    assert x.shape == (3, 1, 64, 64) and y.shape == (3, 64, 64)
    with pytest.raises(ValueError):
        ds.to_array_dataset([])


def write_cifar(path, rng, count):
    records = np.zeros((count, ds.CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = rng.integers(0, 20, size=count)
    records[:, 1] = rng.integers(0, 100, size=count)
    records[:, 2:] = rng.integers(0, 256, size=(count, 3072))
    path.write_bytes(records.tobytes())
    return records


def test_load_cifar100(tmp_path, rng):
    path = tmp_path / "train.bin"
    records = write_cifar(path, rng, 3)
    images, fine, coarse = ds.load_cifar100(path)
    assert images.shape == (3, 3, 32, 32)
    assert fine.tolist() == records[:, 1].tolist()
    assert coarse.tolist() == records[:, 0].tolist()
    assert images[1, 2, 0, 5] == records[1, 2 + 2 * 1024 + 5] / 255.0
    path.write_bytes(records.tobytes()[:-10])
    with pytest.raises(FormatError):
        ds.load_cifar100(path)


def test_standardized_channels(rng):
    train = rng.uniform(size=(20, 3, 32, 32))
    test = rng.uniform(size=(5, 3, 32, 32))
    padded_train, padded_test = ds.preprocess_cifar(train, test)
    assert padded_train.shape == (20, 3, 36, 36)
    assert padded_test.shape == (5, 3, 36, 36)
    core = ds.center_crop(padded_train)
    np.testing.assert_allclose(core.mean(axis=(0, 2, 3)), 0.0, atol=1e-6)
    np.testing.assert_allclose(core.std(axis=(0, 2, 3)), 1.0, atol=1e-6)


def test_zca_whitening(rng):
    train = rng.uniform(size=(50, 1, 4, 4))
    whitened, = ds.zca_whiten(train)
    assert whitened.shape == train.shape
    np.testing.assert_allclose(whitened.reshape(50, -1).mean(axis=0), 0.0, atol=1e-10)


def test_random_crop_flip(rng):
    batch = rng.normal(size=(4, 3, 36, 36))
    crops = ds.random_crop_flip(batch, np.random.default_rng(5))
    again = ds.random_crop_flip(batch, np.random.default_rng(5))
    assert crops.shape == (4, 3, 32, 32)
    assert np.array_equal(crops, again)
    assert np.array_equal(ds.center_crop(batch), batch[:, :, 2:34, 2:34])
