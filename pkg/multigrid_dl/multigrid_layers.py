"""
Pyramids of grids and the operators acting on them: multigrid convolution,
residual multigrid units, pyramid-wide pooling and input pyramids.
"""
import logging

import numpy as np

from multigrid_dl import tensor_core as tc
from multigrid_dl.errors import PyramidError

logger = logging.getLogger(__name__)


class Pyramid:
    """
    grids at dyadic scales, index 0 is the finest
    """

    def __init__(self, grids):
        self.grids = list(grids)
        self.validate()

    def validate(self):
        if not self.grids:
            raise PyramidError("a pyramid needs at least one grid", op="pyramid")
        n, _, h, w = self.grids[0].shape
        if h < 1 or w < 1:
            raise PyramidError(f"finest grid is {h}x{w}", op="pyramid", level=0)
        for level in range(1, len(self.grids)):
            grid = self.grids[level]
            prev_h, prev_w = self.grids[level - 1].shape[2:]
            if grid.shape[0] != n:
                raise PyramidError(f"level {level} has batch {grid.shape[0]}, expected {n}",
                                   op="pyramid", level=level)
            gh, gw = grid.shape[2:]
            if prev_h % 2 or prev_w % 2 or (gh, gw) != (prev_h // 2, prev_w // 2):
                raise PyramidError(f"level {level} is {gh}x{gw}, not half of {prev_h}x{prev_w}",
                                   op="pyramid", level=level)

    @property
    def levels(self):
        return len(self.grids)

    @property
    def channels(self):
        return tuple(g.shape[1] for g in self.grids)

    @property
    def sizes(self):
        return tuple(tuple(g.shape[2:]) for g in self.grids)

    @property
    def finest(self):
        return self.grids[0]

    @property
    def coarsest(self):
        return self.grids[-1]

    def map(self, fn):
        return Pyramid(fn(g) for g in self.grids)

    def truncate(self, levels):
        """keep the `levels` finest grids"""
        return Pyramid(self.grids[:levels])

    def __len__(self):
        return len(self.grids)

    def __getitem__(self, level):
        return self.grids[level]

    def __iter__(self):
        return iter(self.grids)

    def __repr__(self):
        return f"Pyramid(channels={self.channels}, sizes={self.sizes})"


def halving_plan(finest_channels, levels):
    """channel plan halving with each coarser grid, at least one channel"""
    return tuple(max(1, int(finest_channels) >> level) for level in range(levels))


class ConvWeights:
    """kernel and optional bias of one plain convolution"""

    def __init__(self, w, b=None):
        self.w = w
        self.b = b

    @classmethod
    def init(cls, rng, c_in, c_out, k=3, dtype=np.float64, bias=True):
        w = tc.Tensor(tc.he_normal(rng, (c_out, c_in, k, k), c_in * k * k, dtype), requires_grad=True)
        b = tc.Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None
        return cls(w, b)

    @property
    def c_in(self):
        return self.w.shape[1]

    @property
    def c_out(self):
        return self.w.shape[0]

    def named_parameters(self, prefix):
        params = [(f"{prefix}.w", self.w)]
        if self.b is not None:
            params.append((f"{prefix}.b", self.b))
        return params

    def __call__(self, x, pad=None):
        return tc.conv2d(x, self.w, self.b, stride=1, pad=pad)


class BatchNorm:
    """per-channel batchnorm parameters and running statistics of one grid"""

    def __init__(self, channels, dtype=np.float64):
        self.gamma = tc.Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = tc.Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def named_parameters(self, prefix):
        return [(f"{prefix}.gamma", self.gamma), (f"{prefix}.beta", self.beta)]

    def named_buffers(self, prefix):
        return [(f"{prefix}.mean", self.running_mean), (f"{prefix}.var", self.running_var)]

    def __call__(self, x, train):
        return tc.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var, train)


def bn_relu(p, norms, train):
    """batchnorm then ReLU, separately on every grid"""
    return Pyramid(tc.relu(norm(g, train)) for norm, g in zip(norms, p))


def gather_channels(in_channels, level):
    """channels seen by output level `level`: pooled finer, same, upsampled coarser"""
    total = in_channels[level]
    if level > 0:
        total += in_channels[level - 1]
    if level + 1 < len(in_channels):
        total += in_channels[level + 1]
    return total


class MgConvWeights:
    """
    independent 3x3 kernels, one per output level
    """

    def __init__(self, convs):
        self.convs = list(convs)

    @classmethod
    def init(cls, rng, in_channels, out_channels, dtype=np.float64, bias=True):
        """
        :param in_channels: [tuple] channel plan of the input pyramid
        :param out_channels: [tuple] channel plan of the output; may have fewer
        levels than the input (the finest ones are produced)
        """
        if len(out_channels) > len(in_channels):
            raise PyramidError(f"cannot produce {len(out_channels)} levels from {len(in_channels)}",
                               op="mg_conv", level=len(in_channels))
        return cls(ConvWeights.init(rng, gather_channels(in_channels, level), c_out, 3, dtype, bias)
                   for level, c_out in enumerate(out_channels))

    @property
    def out_channels(self):
        return tuple(conv.c_out for conv in self.convs)

    def named_parameters(self, prefix):
        params = []
        for level, conv in enumerate(self.convs):
            params.extend(conv.named_parameters(f"{prefix}.{level}"))
        return params


def gather(p, level):
    parts = []
    if level > 0:
        parts.append(tc.maxpool2x(p[level - 1]))
    parts.append(p[level])
    if level + 1 < p.levels:
        parts.append(tc.upsample_nearest2x(p[level + 1]))
    if len(parts) == 1:
        return parts[0]
    return tc.concat_channels(parts)


def mg_conv(p, weights):
    """
    multigrid convolution: for each output level, concatenate the max-pooled
    finer neighbour, the grid itself and the upsampled coarser neighbour,
    then apply that level's 3x3 same-padding convolution
    :param p: [Pyramid] input
    :param weights: [MgConvWeights] one kernel per output level
    :return: [Pyramid] with channel plan weights.out_channels
    """
    if len(weights.convs) > p.levels:
        raise PyramidError(f"mg_conv has {len(weights.convs)} output levels but the input "
                           f"pyramid has {p.levels}", op="mg_conv", level=p.levels)
    out = []
    for level, conv in enumerate(weights.convs):
        expected = gather_channels(p.channels, level)
        if conv.c_in != expected:
            raise PyramidError(f"level {level} kernel expects {conv.c_in} gathered channels, "
                               f"pyramid {p.channels} provides {expected}",
                               op="mg_conv", level=level)
        out.append(conv(gather(p, level)))
    return Pyramid(out)


class ResUnitWeights:
    """
    two multigrid convolutions with per-grid pre-activation and an optional
    per-level 1x1 projection shortcut
    """

    def __init__(self, norm1, conv1, norm2, conv2, projection=None):
        self.norm1 = list(norm1)
        self.conv1 = conv1
        self.norm2 = list(norm2)
        self.conv2 = conv2
        self.projection = projection

    @classmethod
    def init(cls, rng, in_channels, out_channels, dtype=np.float64):
        conv1 = MgConvWeights.init(rng, in_channels, out_channels, dtype)
        conv2 = MgConvWeights.init(rng, out_channels, out_channels, dtype)
        projection = None
        if tuple(in_channels[:len(out_channels)]) != tuple(out_channels):
            projection = [ConvWeights.init(rng, c_in, c_out, 1, dtype, bias=False)
                          for c_in, c_out in zip(in_channels, out_channels)]
        return cls([BatchNorm(c, dtype) for c in in_channels], conv1,
                   [BatchNorm(c, dtype) for c in out_channels], conv2, projection)

    def named_parameters(self, layer):
        """
        :param layer: [int] depth index of the unit's first convolution; the
        norm feeding convolution i is named bn.<i>
        """
        params = []
        for offset, (norms, conv) in enumerate(((self.norm1, self.conv1), (self.norm2, self.conv2))):
            for level, norm in enumerate(norms):
                params.extend(norm.named_parameters(f"bn.{layer + offset}.{level}"))
            params.extend(conv.named_parameters(f"mgconv.{layer + offset}"))
        for level, proj in enumerate(self.projection or []):
            params.extend(proj.named_parameters(f"proj.{layer}.{level}"))
        return params

    def named_buffers(self, layer):
        buffers = []
        for offset, norms in enumerate((self.norm1, self.norm2)):
            for level, norm in enumerate(norms):
                buffers.extend(norm.named_buffers(f"bn.{layer + offset}.{level}"))
        return buffers


def res_mg_unit(p, weights, train):
    """
    pre-activation residual unit:
    out = shortcut(p) + mg_conv2(bn_relu(mg_conv1(bn_relu(p))))
    with per-grid batchnorm/ReLU and per-level addition
    """
    out_channels = weights.conv2.out_channels
    branch = mg_conv(bn_relu(p, weights.norm1, train), weights.conv1)
    branch = mg_conv(bn_relu(branch, weights.norm2, train), weights.conv2)
    shortcut = p.truncate(len(out_channels))
    if weights.projection is not None:
        shortcut = Pyramid(proj(g, pad=0) for proj, g in zip(weights.projection, shortcut))
    elif shortcut.channels != out_channels:
        raise PyramidError(f"residual unit maps {p.channels} to {out_channels} without a projection",
                           op="res_mg_unit", level=0)
    return Pyramid(tc.add(s, b) for s, b in zip(shortcut, branch))


def pyramid_pool(p):
    """
    2x2 max-pool every grid; coarse grids that cannot be pooled (odd or unit
    side) are dropped
    """
    pooled = []
    for level, grid in enumerate(p):
        h, w = grid.shape[2:]
        if h < 2 or w < 2 or h % 2 or w % 2:
            if level == 0:
                raise PyramidError(f"finest grid {h}x{w} cannot be pooled", op="pyramid_pool", level=0)
            logger.debug("pyramid_pool dropped %d coarse grid(s)", p.levels - level)
            break
        pooled.append(tc.maxpool2x(grid))
    return Pyramid(pooled)


def downsample_inputs(image, levels):
    """
    :param image: [Tensor] (n, c, h, w) with h, w divisible by 2^(levels-1)
    :return: [list of Tensor] image average-pooled by 1, 2, 4, ...
    """
    h, w = image.shape[2:]
    factor = 2 ** (levels - 1)
    if levels < 1 or h % factor or w % factor:
        raise PyramidError(f"a {h}x{w} image cannot feed {levels} pyramid levels",
                           op="build_input_pyramid", level=levels - 1)
    return [tc.avgpool(image, 2 ** level) for level in range(levels)]


def build_input_pyramid(image, levels, stems):
    """
    :param image: [Tensor] input batch
    :param levels: [int] pyramid depth
    :param stems: [list of ConvWeights] one 3x3 stem per level
    :return: [Pyramid] stem outputs
    """
    if len(stems) != levels:
        raise PyramidError(f"{len(stems)} stems for {levels} levels", op="build_input_pyramid",
                           level=len(stems))
    return Pyramid(stem(raw) for stem, raw in zip(stems, downsample_inputs(image, levels)))


def upsample_pyramid(p):
    return p.map(tc.upsample_nearest2x)


def concat_pyramids(a, b):
    """
    per-level channel concatenation; levels present in only one operand pass
    through unchanged
    """
    grids = []
    for level in range(max(a.levels, b.levels)):
        parts = [q[level] for q in (a, b) if level < q.levels]
        grids.append(parts[0] if len(parts) == 1 else tc.concat_channels(parts))
    return Pyramid(grids)
