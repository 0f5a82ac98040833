"""
Architecture builders for the single-grid, multigrid, progressive multigrid,
residual and U-shaped network families, plus parameter and multiply-add
accounting.

A built ``Model`` is an ordered list of steps acting on a forward state
(input image, stem pyramid, live pyramid, skip stack). Every step also knows
how to advance a shape-only state, which is what the builder uses to size
weights and what ``count_flops`` uses to count multiply-adds analytically.
"""
import copy
import logging
import math
import re
from collections import OrderedDict
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd

from multigrid_dl import tensor_core as tc
from multigrid_dl.errors import ArchitectureError, ShapeError
from multigrid_dl.multigrid_layers import (
    BatchNorm,
    ConvWeights,
    MgConvWeights,
    Pyramid,
    ResUnitWeights,
    bn_relu,
    build_input_pyramid,
    concat_pyramids,
    gather_channels,
    halving_plan,
    mg_conv,
    pyramid_pool,
    res_mg_unit,
    upsample_pyramid,
)

logger = logging.getLogger(__name__)

BASE_FAMILIES = ("VGG", "MG", "PMG", "RES", "R-MG", "R-PMG", "SG", "R-SG", "UNET", "UMG")
SMALL_FAMILIES = ("MG-sm", "PMG-sm", "R-MG-sm", "R-PMG-sm")
FAMILIES = BASE_FAMILIES + SMALL_FAMILIES

CLASSIFY_FAMILIES = ("VGG", "MG", "PMG", "RES", "R-MG", "R-PMG")
DENSE_FAMILIES = ("SG", "R-SG", "MG", "PMG", "R-MG", "R-PMG", "UNET", "UMG")
TASKS = ("classify", "seg", "spt")
SEG_CLASSES = 11
DEFAULT_WIDTHS = (32, 64, 128, 256, 256)
CLASSIFY_SECTIONS = 5

_ALIASES = {"U-NET": "UNET", "U-MG": "UMG", "UNET": "UNET", "UMG": "UMG"}


@dataclass(frozen=True)
class ArchSpec:
    """
    declarative network description
    :param family: [str] one of FAMILIES
    :param depth: [int] conv-layer count as in the network's name
    :param task: [str] 'classify', 'seg' (per-pixel classes) or 'spt'
    (per-pixel regression)
    :param widths: [tuple] finest-grid channels per section (classification)
    or per scale (U-shaped nets); dense nets use widths[0] throughout
    :param levels: [int] pyramid levels of multigrid families
    :param multiplier: [float or None] global channel multiplier; None means
    1 for regular families and "calibrate" for the -sm families
    :param scales: [int] resolution scales of UNET/UMG
    """

    family: str
    depth: int
    task: str = "classify"
    num_classes: int = 100
    in_channels: int = 3
    widths: tuple = DEFAULT_WIDTHS
    levels: int = 3
    multiplier: float = None
    scales: int = 4

    @classmethod
    def from_name(cls, name, **kwargs):
        family, depth = parse_name(name)
        return cls(family=family, depth=depth, **kwargs)

    @property
    def name(self):
        return f"{self.family}-{self.depth}"

    @property
    def base_family(self):
        return self.family[:-3] if self.family.endswith("-sm") else self.family

    @property
    def small(self):
        return self.family.endswith("-sm")

    @property
    def residual(self):
        return self.base_family in ("RES", "R-MG", "R-PMG", "R-SG")

    @property
    def progressive(self):
        return self.base_family in ("PMG", "R-PMG")

    @property
    def u_shaped(self):
        return self.base_family in ("UNET", "UMG")

    @property
    def grid_levels(self):
        multigrid = self.base_family in ("MG", "PMG", "R-MG", "R-PMG", "UMG")
        return self.levels if multigrid else 1

    @property
    def dense(self):
        return self.task != "classify"

    @property
    def head_channels(self):
        if self.task == "seg":
            return SEG_CLASSES
        if self.task == "spt":
            return 1
        return self.num_classes

    def plan(self, width, levels=None):
        """channel plan of one section, scaled by the multiplier"""
        m = 1.0 if self.multiplier is None else self.multiplier
        levels = self.grid_levels if levels is None else levels
        return tuple(scale_channels(c, m) for c in halving_plan(width, levels))

    def baseline(self):
        """the single-grid family whose parameter count an -sm family matches"""
        if self.dense:
            family = "R-SG" if self.residual else "SG"
        else:
            family = "RES" if self.residual else "VGG"
        return replace(self, family=family, multiplier=None)


def parse_name(name):
    """
    :param name: [str] e.g. 'VGG-16', 'PMG-sm-16', 'U-NET-11', 'R-SG-20'
    :return: [tuple] (family, depth)
    """
    match = re.fullmatch(r"\s*(.+?)-(\d+)\s*", name)
    if match is None:
        raise ArchitectureError(f"cannot parse architecture name '{name}'", family=name)
    family = match.group(1)
    family = _ALIASES.get(family.upper(), family)
    if family.lower().endswith("-sm"):
        family = family[:-3].upper() + "-sm"
    else:
        family = family.upper()
    if family not in FAMILIES:
        raise ArchitectureError(f"unknown family '{family}', expected one of {FAMILIES}",
                                family=family)
    return family, int(match.group(2))


def scale_channels(channels, multiplier):
    """round channels*multiplier to an integer, halves toward fewer, at least 1"""
    return max(1, math.ceil(channels * multiplier - 0.5))


def _thirds(total):
    """split a budget into three stages, remainder to the last"""
    third = total // 3
    return [third, third, total - 2 * third]


def layout(spec):
    """
    decompose spec.depth into the family's repeat count
    :return: [int] layers per section (plain), units per section (residual),
    body layers/units (dense) or convs per scale (U-shaped)
    """
    family = spec.base_family
    if spec.task not in TASKS:
        raise ArchitectureError(f"unknown task '{spec.task}', expected one of {TASKS}",
                                family=spec.family, depth=spec.depth)
    allowed = DENSE_FAMILIES if spec.dense else CLASSIFY_FAMILIES
    if family not in allowed:
        raise ArchitectureError(f"{spec.family} is not available for task '{spec.task}'",
                                family=spec.family, depth=spec.depth)
    d = spec.depth
    if spec.u_shaped:
        s = spec.scales
        if s < 2 or s > len(spec.widths):
            raise ArchitectureError(f"{s} scales need 2..{len(spec.widths)} widths",
                                    family=spec.family, depth=d)
        count, rem = divmod(d - s, 2 * s - 1)
        rule = f"{s}k + {s - 1}(k+1) + 1"
    elif spec.dense and spec.residual:
        count, rem = divmod(d - 2, 2)
        rule = "2u + 2"
    elif spec.dense:
        count, rem = d - 2, 0
        rule = "L + 2"
    elif spec.progressive and spec.residual:
        count, rem = divmod(d - 2, 14)
        rule = "14u + 2"
    elif spec.progressive:
        count, rem = divmod(d - 2, 7)
        rule = "7k + 2"
    elif spec.residual:
        count, rem = divmod(d - 2, 10)
        rule = "10u + 2"
    else:
        count, rem = divmod(d - 1, 5)
        rule = "5k + 1"
    if rem or count < 1:
        raise ArchitectureError(f"depth {d} is not expressible as {rule} for {spec.family}",
                                family=spec.family, depth=d)
    if not spec.dense and len(spec.widths) < CLASSIFY_SECTIONS:
        raise ArchitectureError(f"classification needs {CLASSIFY_SECTIONS} section widths",
                                family=spec.family, depth=d)
    return count


class _State:
    def __init__(self, image):
        self.image = image
        self.stem = None
        self.live = None
        self.skips = []
        self.output = None


class _ShapeState:
    """per-sample shapes: image (c, h, w); pyramids as lists of (c, h, w)"""

    def __init__(self, image):
        self.image = tuple(image)
        self.stem = None
        self.live = None
        self.skips = []
        self.output = None


def _conv_shapes(live, weights):
    channels = [c for c, _, _ in live]
    out, macs = [], 0
    for level, conv in enumerate(weights.convs):
        _, h, w = live[level]
        macs += conv.c_out * gather_channels(channels, level) * 9 * h * w
        out.append((conv.c_out, h, w))
    return out, macs


def _stem_start(stem, finest_hw):
    for level, hw in enumerate(stem):
        if tuple(hw) == tuple(finest_hw):
            return level
    raise ShapeError("live pyramid does not align with the stem pyramid", op="activate")


class Step:
    kind = "step"
    layers = 0

    def named_parameters(self):
        return []

    def named_buffers(self):
        return []

    def forward(self, state, train):
        raise NotImplementedError

    def shapes(self, state):
        """advance a _ShapeState; return per-sample multiply-adds"""
        return 0


class Stem(Step):
    """
    input pyramid (average-pooled copies of the image, one 3x3 conv per
    level); the `live_levels` coarsest grids go live
    """

    kind = "stem"
    layers = 1

    def __init__(self, convs, norms, live_levels):
        self.convs = convs
        self.norms = norms
        self.live_levels = live_levels

    def named_parameters(self):
        params = []
        for level, conv in enumerate(self.convs):
            params.extend(conv.named_parameters(f"stem.{level}"))
        for level, norm in enumerate(self.norms or []):
            params.extend(norm.named_parameters(f"bn.0.{level}"))
        return params

    def named_buffers(self):
        buffers = []
        for level, norm in enumerate(self.norms or []):
            buffers.extend(norm.named_buffers(f"bn.0.{level}"))
        return buffers

    def forward(self, state, train):
        tc.trace_layer("stem")
        p = build_input_pyramid(state.image, len(self.convs), self.convs)
        if self.norms:
            p = bn_relu(p, self.norms, train)
        state.stem = p
        state.live = Pyramid(p.grids[p.levels - self.live_levels:])

    def shapes(self, state):
        c, h, w = state.image
        levels = len(self.convs)
        factor = 2 ** (levels - 1)
        if h % factor or w % factor:
            raise ShapeError(f"a {h}x{w} input cannot feed {levels} pyramid levels",
                             op="build_input_pyramid", expected=factor, actual=(h, w))
        pyramid, macs = [], 0
        for level, conv in enumerate(self.convs):
            hl, wl = h >> level, w >> level
            macs += conv.c_out * c * 9 * hl * wl
            pyramid.append((conv.c_out, hl, wl))
        state.stem = pyramid
        state.live = pyramid[levels - self.live_levels:]
        return macs


class Lift(Step):
    """the raw image as a one-grid pyramid"""

    kind = "input"

    def forward(self, state, train):
        state.stem = Pyramid([state.image])
        state.live = state.stem

    def shapes(self, state):
        state.stem = [state.image]
        state.live = state.stem
        return 0


class MgLayer(Step):
    kind = "mgconv"
    layers = 1

    def __init__(self, index, weights, norms):
        self.index = index
        self.weights = weights
        self.norms = norms

    def named_parameters(self):
        params = self.weights.named_parameters(f"mgconv.{self.index}")
        for level, norm in enumerate(self.norms or []):
            params.extend(norm.named_parameters(f"bn.{self.index}.{level}"))
        return params

    def named_buffers(self):
        buffers = []
        for level, norm in enumerate(self.norms or []):
            buffers.extend(norm.named_buffers(f"bn.{self.index}.{level}"))
        return buffers

    def forward(self, state, train):
        tc.trace_layer(f"mgconv.{self.index}")
        p = mg_conv(state.live, self.weights)
        if self.norms:
            p = bn_relu(p, self.norms, train)
        state.live = p

    def shapes(self, state):
        state.live, macs = _conv_shapes(state.live, self.weights)
        return macs


class ResUnit(Step):
    kind = "res_unit"
    layers = 2

    def __init__(self, index, weights):
        self.index = index
        self.weights = weights

    def named_parameters(self):
        return self.weights.named_parameters(self.index)

    def named_buffers(self):
        return self.weights.named_buffers(self.index)

    def forward(self, state, train):
        tc.trace_layer(f"mgconv.{self.index}")
        tc.trace_layer(f"mgconv.{self.index + 1}")
        state.live = res_mg_unit(state.live, self.weights, train)

    def shapes(self, state):
        mid, macs = _conv_shapes(state.live, self.weights.conv1)
        out, more = _conv_shapes(mid, self.weights.conv2)
        macs += more
        for proj, (c, h, w) in zip(self.weights.projection or [], state.live):
            macs += proj.c_out * c * h * w
        state.live = out
        return macs


class Pool(Step):
    kind = "pool"

    def forward(self, state, train):
        state.live = pyramid_pool(state.live)

    def shapes(self, state):
        pooled = []
        for c, h, w in state.live:
            if h < 2 or w < 2 or h % 2 or w % 2:
                if not pooled:
                    raise ShapeError(f"finest grid {h}x{w} cannot be pooled", op="pyramid_pool",
                                     actual=(h, w))
                break
            pooled.append((c, h // 2, w // 2))
        state.live = pooled
        return 0


class Activate(Step):
    """prepend the next `count` finer stem grids to the live pyramid"""

    kind = "activate"

    def __init__(self, count):
        self.count = count

    def forward(self, state, train):
        start = _stem_start(state.stem.sizes, state.live.finest.shape[2:])
        if start < self.count:
            raise ShapeError("no finer stem grid left to activate", op="activate")
        state.live = Pyramid(state.stem.grids[start - self.count:start] + state.live.grids)

    def shapes(self, state):
        start = _stem_start([(h, w) for _, h, w in state.stem], state.live[0][1:])
        if start < self.count:
            raise ShapeError("no finer stem grid left to activate", op="activate")
        state.live = state.stem[start - self.count:start] + list(state.live)
        return 0


class PostNorm(Step):
    """final per-grid batchnorm and ReLU of pre-activation residual nets"""

    kind = "post_norm"

    def __init__(self, norms):
        self.norms = norms

    def named_parameters(self):
        params = []
        for level, norm in enumerate(self.norms):
            params.extend(norm.named_parameters(f"postbn.{level}"))
        return params

    def named_buffers(self):
        buffers = []
        for level, norm in enumerate(self.norms):
            buffers.extend(norm.named_buffers(f"postbn.{level}"))
        return buffers

    def forward(self, state, train):
        state.live = bn_relu(state.live, self.norms, train)


class PushSkip(Step):
    kind = "push_skip"

    def forward(self, state, train):
        state.skips.append(state.live)

    def shapes(self, state):
        state.skips.append(list(state.live))
        return 0


class ConcatSkip(Step):
    kind = "concat_skip"

    def forward(self, state, train):
        state.live = concat_pyramids(state.skips.pop(), state.live)

    def shapes(self, state):
        skip = state.skips.pop()
        merged = []
        for level in range(max(len(skip), len(state.live))):
            parts = [q[level] for q in (skip, state.live) if level < len(q)]
            merged.append((sum(c for c, _, _ in parts), parts[0][1], parts[0][2]))
        state.live = merged
        return 0


class UpConv(Step):
    """
    nearest 2x upsampling of every grid, then a per-grid 2x2 convolution
    (pad 0 after replicating one bottom row and one right column)
    """

    kind = "upconv"
    layers = 1

    def __init__(self, index, convs, norms):
        self.index = index
        self.convs = convs
        self.norms = norms

    def named_parameters(self):
        params = []
        for level, conv in enumerate(self.convs):
            params.extend(conv.named_parameters(f"upconv.{self.index}.{level}"))
        for level, norm in enumerate(self.norms):
            params.extend(norm.named_parameters(f"bn.{self.index}.{level}"))
        return params

    def named_buffers(self):
        buffers = []
        for level, norm in enumerate(self.norms):
            buffers.extend(norm.named_buffers(f"bn.{self.index}.{level}"))
        return buffers

    def forward(self, state, train):
        tc.trace_layer(f"upconv.{self.index}")
        up = upsample_pyramid(state.live)
        p = Pyramid(conv(tc.replicate_pad(g, 1, 1), pad=0) for conv, g in zip(self.convs, up))
        state.live = bn_relu(p, self.norms, train)

    def shapes(self, state):
        out, macs = [], 0
        for conv, (c, h, w) in zip(self.convs, state.live):
            macs += conv.c_out * c * 4 * (2 * h) * (2 * w)
            out.append((conv.c_out, 2 * h, 2 * w))
        state.live = out
        return macs


class ClassifierHead(Step):
    """global average pool of the coarsest grid, then one linear layer"""

    kind = "head"
    layers = 1

    def __init__(self, w, b):
        self.w = w
        self.b = b

    def named_parameters(self):
        return [("head.w", self.w), ("head.b", self.b)]

    def forward(self, state, train):
        tc.trace_layer("head")
        state.output = tc.linear(tc.global_avg_pool(state.live.coarsest), self.w, self.b)

    def shapes(self, state):
        c = state.live[-1][0]
        state.output = (self.w.shape[0],)
        return self.w.shape[0] * c


class DenseHead(Step):
    """1x1 convolution on the finest grid"""

    kind = "head"
    layers = 1

    def __init__(self, conv):
        self.conv = conv

    def named_parameters(self):
        return self.conv.named_parameters("head")

    def forward(self, state, train):
        tc.trace_layer("head")
        state.output = self.conv(state.live.finest, pad=0)

    def shapes(self, state):
        c, h, w = state.live[0]
        state.output = (self.conv.c_out, h, w)
        return self.conv.c_out * c * h * w


class FinestOutput(Step):
    kind = "output"

    def forward(self, state, train):
        state.output = state.live.finest

    def shapes(self, state):
        state.output = state.live[0]
        return 0


class Model:
    """
    an ordered list of steps with named parameters and buffers
    """

    def __init__(self, spec, input_size, steps, dtype=np.float64):
        self.spec = spec
        self.input_size = tuple(input_size)
        self.steps = list(steps)
        self.dtype = tc.as_dtype(dtype)

    @property
    def task(self):
        return self.spec.task if self.spec is not None else "probe"

    def named_parameters(self):
        params = []
        for step in self.steps:
            params.extend(step.named_parameters())
        return params

    def named_buffers(self):
        buffers = []
        for step in self.steps:
            buffers.extend(step.named_buffers())
        return buffers

    def parameters(self):
        return OrderedDict(self.named_parameters())

    def state_dict(self):
        state = OrderedDict((name, t.data) for name, t in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, tensors):
        """copy arrays into the model's parameters and buffers in place"""
        targets = OrderedDict((name, t.data) for name, t in self.named_parameters())
        targets.update(self.named_buffers())
        missing = [k for k in targets if k not in tensors]
        unexpected = [k for k in tensors if k not in targets]
        if missing or unexpected:
            family = self.spec.family if self.spec else None
            depth = self.spec.depth if self.spec else None
            raise ArchitectureError(f"state does not match the model: missing {missing[:3]}, "
                                    f"unexpected {unexpected[:3]}", family=family, depth=depth)
        for name, target in targets.items():
            source = np.asarray(tensors[name])
            if source.shape != target.shape:
                raise ShapeError(f"'{name}' has shape {source.shape}, model expects {target.shape}",
                                 op="load_state_dict", expected=target.shape, actual=source.shape)
            np.copyto(target, source, casting="unsafe")

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.zero_grad()

    def copy(self):
        return copy.deepcopy(self)

    def forward(self, x, train=False):
        """
        :param x: [Tensor or np array] (n, c, h, w) input batch
        :param train: [bool] batchnorm uses batch statistics and updates its
        running statistics
        :return: [Tensor] logits (n, K) for classification, (n, K, h, w) for
        dense tasks, the finest grid for probe stacks
        """
        if not isinstance(x, tc.Tensor):
            x = tc.Tensor(np.asarray(x, dtype=self.dtype))
        state = _State(x)
        for step in self.steps:
            step.forward(state, train)
        return state.output

    __call__ = forward

    def predict(self, x):
        return self.forward(x, train=False).data

    def summary(self, input_size=None):
        """
        per-step table: layer, output shape(s) per level, params, flops
        (multiply-adds for one sample)
        :return: [pd DataFrame]
        """
        c = self.spec.in_channels if self.spec is not None else self.input_size[0]
        size = self.input_size[-2:] if input_size is None else tuple(input_size)
        state = _ShapeState((c, *size))
        rows = []
        for i, step in enumerate(self.steps):
            macs = step.shapes(state)
            params = sum(t.data.size for _, t in step.named_parameters())
            if not (step.layers or params):
                continue
            if step.kind == "head":
                shape = "x".join(str(s) for s in state.output)
            else:
                shape = " | ".join(f"{ch}x{h}x{w}" for ch, h, w in state.live)
            rows.append({"step": i, "layer": _label(step), "kind": step.kind, "layers": step.layers,
                         "output": shape, "params": params, "flops": macs})
        return pd.DataFrame(rows, columns=["step", "layer", "kind", "layers", "output", "params", "flops"])

    def __repr__(self):
        name = self.spec.name if self.spec is not None else "probe"
        return f"Model({name}, input={self.input_size}, steps={len(self.steps)})"


def _label(step):
    if step.kind in ("mgconv", "res_unit", "upconv"):
        return f"{step.kind}.{step.index}"
    return step.kind


def count_params(model):
    """exact number of trainable weight elements"""
    return int(sum(t.data.size for _, t in model.named_parameters()))


def count_flops(model, input_size=None):
    """
    multiply-adds of all convolutions and linear layers for one sample,
    counted analytically from weight shapes (batchnorm/ReLU excluded)
    :param input_size: [tuple] (h, w); defaults to the size the model was built for
    """
    c = model.spec.in_channels if model.spec is not None else model.input_size[0]
    size = model.input_size[-2:] if input_size is None else tuple(input_size)
    state = _ShapeState((c, *size))
    return int(sum(step.shapes(state) for step in model.steps))


class _Builder:
    """appends steps while tracking per-sample shapes to size the next weights"""

    def __init__(self, in_channels, input_size, rng, dtype):
        self.rng = rng
        self.dtype = dtype
        self.in_channels = in_channels
        self.state = _ShapeState((in_channels, *input_size))
        self.steps = []
        self.layer = 0

    @property
    def live(self):
        return tuple(c for c, _, _ in self.state.live)

    def _add(self, step):
        step.shapes(self.state)
        self.steps.append(step)
        self.layer += step.layers

    def _norms(self, plan):
        return [BatchNorm(c, self.dtype) for c in plan]

    def stem(self, plan, live_levels, norm):
        convs = [ConvWeights.init(self.rng, self.in_channels, c, 3, self.dtype) for c in plan]
        self._add(Stem(convs, self._norms(plan) if norm else None, live_levels))

    def lift(self):
        self._add(Lift())

    def mg_layer(self, plan, norm=True):
        weights = MgConvWeights.init(self.rng, self.live, plan, self.dtype)
        self._add(MgLayer(self.layer, weights, self._norms(plan) if norm else None))

    def res_unit(self, plan):
        self._add(ResUnit(self.layer, ResUnitWeights.init(self.rng, self.live, plan, self.dtype)))

    def block(self, plan, residual):
        if residual:
            self.res_unit(plan)
        else:
            self.mg_layer(plan)

    def pool(self):
        self._add(Pool())

    def activate(self, count):
        if count > 0:
            self._add(Activate(count))

    def post_norm(self):
        self._add(PostNorm(self._norms(self.live)))

    def push_skip(self):
        self._add(PushSkip())

    def concat_skip(self):
        self._add(ConcatSkip())

    def up_conv(self, plan):
        convs = [ConvWeights.init(self.rng, c_in, c_out, 2, self.dtype)
                 for c_in, c_out in zip(self.live, plan)]
        self._add(UpConv(self.layer, convs, self._norms(plan)))

    def classifier_head(self, num_classes):
        c = self.live[-1]
        w = tc.Tensor(tc.he_normal(self.rng, (num_classes, c), c, self.dtype), requires_grad=True)
        b = tc.Tensor(np.zeros(num_classes, dtype=self.dtype), requires_grad=True)
        self._add(ClassifierHead(w, b))

    def dense_head(self, channels):
        self._add(DenseHead(ConvWeights.init(self.rng, self.live[0], channels, 1, self.dtype)))

    def finest_output(self):
        self._add(FinestOutput())


def _stage_activations(levels):
    """grids added when entering stages B and C of a progressive net"""
    return [0, min(1, levels - 1), max(0, levels - 2)]


def _build_classifier(b, spec, count):
    levels = spec.grid_levels
    plans = [spec.plan(spec.widths[s], levels) for s in range(CLASSIFY_SECTIONS)]
    residual = spec.residual
    if spec.progressive:
        b.stem(plans[0], 1, norm=not residual)
        for stage, (added, n) in enumerate(zip(_stage_activations(levels), _thirds(3 * count))):
            b.activate(added)
            for _ in range(n):
                b.block(plans[0][levels - len(b.live):], residual)
    else:
        b.stem(plans[0], levels, norm=not residual)
        for _ in range(count if residual else count - 1):
            b.block(plans[0], residual)
    for s in range(1, CLASSIFY_SECTIONS):
        b.pool()
        for _ in range(count):
            b.block(plans[s][:len(b.live)], residual)
    if residual:
        b.post_norm()
    b.classifier_head(spec.head_channels)


def _build_dense(b, spec, count):
    """
    full-resolution body; grids that can no longer reach the finest output
    before the head are dropped
    """
    levels = spec.grid_levels
    plan = spec.plan(spec.widths[0], levels)
    residual = spec.residual
    convs_per_block = 2 if residual else 1
    if spec.progressive:
        stages = list(zip(_stage_activations(levels), _thirds(count)))
        b.stem(plan, 1, norm=not residual)
    else:
        stages = [(0, count)]
        b.stem(plan, levels, norm=not residual)
    remaining = count
    for added, n in stages:
        b.activate(added)
        for _ in range(n):
            remaining -= 1
            out_levels = min(len(b.live), remaining * convs_per_block + 1)
            live_plan = plan[levels - len(b.live):]
            b.block(live_plan[:out_levels], residual)
    if residual:
        b.post_norm()
    b.dense_head(spec.head_channels)


def _build_u_shaped(b, spec, count):
    levels = spec.grid_levels
    scales = spec.scales
    b.stem(spec.plan(spec.widths[0], levels), levels, norm=True)
    for s in range(scales):
        for _ in range(count - 1 if s == 0 else count):
            b.mg_layer(spec.plan(spec.widths[s], levels)[:len(b.live)])
        if s < scales - 1:
            b.push_skip()
            b.pool()
    for s in reversed(range(scales - 1)):
        b.up_conv(spec.plan(spec.widths[s], levels)[:len(b.live)])
        b.concat_skip()
        for _ in range(count):
            b.mg_layer(spec.plan(spec.widths[s], levels)[:len(b.live)])
    b.dense_head(spec.head_channels)


def default_input_size(spec):
    return (64, 64) if spec.dense else (32, 32)


def build(spec, input_size=None, rng=None, dtype=np.float64):
    """
    build and initialize a network
    :param spec: [ArchSpec or str] architecture, or a name like 'PMG-16'
    :param input_size: [tuple] (h, w) of the input images
    :param rng: [np.random.Generator] weight initialization stream
    :param dtype: numpy float dtype of weights and activations
    :return: [Model]
    """
    if isinstance(spec, str):
        spec = ArchSpec.from_name(spec)
    input_size = tuple(input_size or default_input_size(spec))
    count = layout(spec)
    if spec.small and spec.multiplier is None:
        spec = calibrate_sm(spec, input_size=input_size)
    rng = np.random.default_rng(0) if rng is None else rng
    b = _Builder(spec.in_channels, input_size, rng, tc.as_dtype(dtype))
    if spec.u_shaped:
        _build_u_shaped(b, spec, count)
    elif spec.dense:
        _build_dense(b, spec, count)
    else:
        _build_classifier(b, spec, count)
    model = Model(spec, (spec.in_channels, *input_size), b.steps, dtype)
    if b.layer != spec.depth:
        raise ArchitectureError(f"{spec.name} realized {b.layer} layers", family=spec.family,
                                depth=spec.depth)
    logger.debug("built %s: %d params", spec.name, count_params(model))
    return model


def probe_stack(kind, depth, levels=3, width=4, in_channels=1, input_size=(64, 64),
                rng=None, dtype=np.float64):
    """
    bare stack of 3x3 convolutions without normalization or head, output on
    the finest grid
    :param kind: [str] 'single' (plain convs on the raw image) or 'multigrid'
    (input pyramid stems followed by `depth` mg_convs)
    """
    rng = np.random.default_rng(0) if rng is None else rng
    b = _Builder(in_channels, input_size, rng, tc.as_dtype(dtype))
    if kind == "single":
        b.lift()
        levels = 1
    elif kind == "multigrid":
        b.stem(halving_plan(width, levels), levels, norm=False)
    else:
        raise ArchitectureError(f"probe stack kind must be 'single' or 'multigrid', got '{kind}'",
                                family=kind, depth=depth)
    for _ in range(depth):
        b.mg_layer(halving_plan(width, levels), norm=False)
    b.finest_output()
    return Model(None, (in_channels, *input_size), b.steps, dtype)


def calibrate_sm(spec, baseline=None, input_size=None, iterations=20):
    """
    scale an -sm family's channels so its parameter count matches a
    baseline's to within 10%, never exceeding it
    :param spec: [ArchSpec] network to calibrate
    :param baseline: [ArchSpec] reference; defaults to spec.baseline()
    :return: [ArchSpec] copy of spec with the found multiplier
    """
    baseline = spec.baseline() if baseline is None else baseline
    input_size = tuple(input_size or default_input_size(spec))
    target = count_params(build(replace(baseline, multiplier=baseline.multiplier or 1.0), input_size))

    def params_at(m):
        return count_params(build(replace(spec, multiplier=m), input_size))

    lo, hi = 1 / 8, 1.0
    if params_at(hi) <= target:
        multiplier = hi
    else:
        if params_at(lo) > target:
            raise ArchitectureError(f"{spec.name} exceeds {target} params even at multiplier {lo}",
                                    family=spec.family, depth=spec.depth)
        for _ in range(iterations):
            mid = (lo + hi) / 2
            if params_at(mid) <= target:
                lo = mid
            else:
                hi = mid
        multiplier = lo
    found = params_at(multiplier)
    if found < 0.9 * target:
        raise ArchitectureError(f"{spec.name} reaches only {found} of {target} params",
                                family=spec.family, depth=spec.depth)
    logger.info("calibrated %s: multiplier %.4f, %d params vs %d", spec.name, multiplier, found, target)
    return replace(spec, multiplier=multiplier)
