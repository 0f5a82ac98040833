"""
Dense tensors, differentiable ops and a reverse-mode gradient tape.

Tensors are numpy arrays with an optional gradient buffer. Ops record
themselves on the innermost active ``Tape`` when at least one input requires
a gradient; outside a tape (evaluation, finite differences) nothing is
recorded. ``Tape.backward`` replays the recorded nodes in reverse order.
"""
import logging
import os
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from multigrid_dl.errors import LabelError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

DTYPES = {"f32": np.float32, "f64": np.float64}
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
SGD_MOMENTUM = 0.9

_debug = os.environ.get("MGDL_DEBUG", "0") == "1"
_tapes = []
_counters = []


def set_debug(flag):
    """
    turn per-op finite checks on or off
    :param flag: [bool] if True every op output is checked for NaN/Inf
    """
    global _debug
    _debug = bool(flag)


def as_dtype(precision):
    """
    :param precision: [str or dtype] 'f32', 'f64' or a numpy float dtype
    :return: [np.dtype]
    """
    if isinstance(precision, str):
        if precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}, got {precision}")
        return np.dtype(DTYPES[precision])
    return np.dtype(precision)


class Tensor:
    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def item(self):
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """
    records differentiable ops while active (use as a context manager)
    """

    def __init__(self):
        self.nodes = []
        self._grads = {}

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def record(self, op, inputs, output, backward):
        self.nodes.append(_Node(op, inputs, output, backward))

    def backward(self, loss, grad=None):
        """
        propagate gradients from loss back through every recorded node and
        accumulate them into the .grad of leaf tensors that require grad
        :param loss: [Tensor] output to differentiate (scalar unless grad given)
        :param grad: [np array] seed gradient with loss's shape. Defaults to
        ones, which for a scalar loss is d(loss)/d(loss)
        """
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError("backward needs a scalar loss or an explicit grad",
                                 op="backward", expected=1, actual=loss.data.size)
            grad = np.ones_like(loss.data)
        grad = np.asarray(grad, dtype=loss.dtype)
        if grad.shape != loss.shape:
            raise ShapeError("seed grad shape does not match output",
                             op="backward", expected=loss.shape, actual=grad.shape)

        produced = {id(node.output) for node in self.nodes}
        leaves = {}
        grads = {id(loss): grad}
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
                if key not in produced:
                    leaves[key] = t
        for key, t in leaves.items():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += grads[key]
        self._grads = grads

    def grad_of(self, tensor):
        """gradient reaching an intermediate tensor in the last backward pass"""
        return self._grads.get(id(tensor))


class OpCounter:
    def __init__(self):
        self.macs = 0
        self.layers = []


@contextmanager
def count_ops():
    """
    count multiply-adds performed by conv2d/linear kernels and the layer
    applications traced by the model zoo while the context is active
    """
    counter = OpCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _count_macs(n):
    for counter in _counters:
        counter.macs += int(n)


def trace_layer(name):
    for counter in _counters:
        counter.layers.append(name)


def check_finite(array, name):
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite values in {name}", tensor=name)


def first_non_finite(named_arrays):
    """
    :param named_arrays: [iterable] (name, array) pairs in scan order
    :return: [str or None] name of the first array holding NaN/Inf
    """
    for name, array in named_arrays:
        if array is not None and not np.all(np.isfinite(array)):
            return name
    return None


def _result(op, inputs, data, backward):
    out = Tensor(data, name=op)
    if _debug:
        check_finite(out.data, op)
    if _tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tapes[-1].record(op, inputs, out, backward)
    return out


def _dims4(x, op):
    if x.ndim != 4:
        raise ShapeError(f"{op} expects a 4-D (n, c, h, w) tensor, got {x.ndim}-D",
                         op=op, dim="ndim", expected=4, actual=x.ndim)
    return x.shape


def conv2d(x, w, b=None, stride=1, pad=None):
    """
    2-D cross-correlation, accumulated one kernel offset at a time
    :param x: [Tensor] input (n, c_in, h, w)
    :param w: [Tensor] kernel (c_out, c_in, k, k)
    :param b: [Tensor] bias (c_out,) or None
    :param stride: [int]
    :param pad: [int] zero padding per side; defaults to k // 2 ("same")
    :return: [Tensor] (n, c_out, (h + 2pad - k)//stride + 1, ...)
    """
    n, c, h, wd = _dims4(x, "conv2d")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d weight must be (c_out, c_in, k, k), got {w.shape}",
                         op="conv2d", dim="weight", actual=w.shape)
    c_out, c_in, k, _ = w.shape
    if c != c_in:
        raise ShapeError(f"conv2d input has {c} channels but weight expects {c_in}",
                         op="conv2d", dim=1, expected=c_in, actual=c)
    if b is not None and b.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},), got {b.shape}",
                         op="conv2d", dim=0, expected=c_out, actual=b.shape)
    if pad is None:
        pad = k // 2
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (wd + 2 * pad - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d kernel {k} does not fit input {h}x{wd} with pad {pad}",
                         op="conv2d", dim=2, expected=k, actual=(h, wd))

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    rows = [slice(i, i + stride * (h_out - 1) + 1, stride) for i in range(k)]
    cols = [slice(j, j + stride * (w_out - 1) + 1, stride) for j in range(k)]

    out = np.zeros((n, h_out, w_out, c_out), dtype=np.result_type(x.data, w.data))
    for i in range(k):
        for j in range(k):
            out += np.tensordot(xp[:, :, rows[i], cols[j]], w.data[:, :, i, j], axes=([1], [1]))
    out = out.transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    _count_macs(n * c_out * h_out * w_out * c_in * k * k)

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)
        dxp = np.zeros_like(xp) if x.requires_grad else None
        dw = np.zeros_like(w.data) if w.requires_grad else None
        for i in range(k):
            for j in range(k):
                if dw is not None:
                    dw[:, :, i, j] = np.tensordot(g, xp[:, :, rows[i], cols[j]],
                                                  axes=([0, 2, 3], [0, 2, 3]))
                if dxp is not None:
                    dxp[:, :, rows[i], cols[j]] += np.tensordot(
                        gt, w.data[:, :, i, j], axes=([3], [0])).transpose(0, 3, 1, 2)
        dx = None
        if dxp is not None:
            dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return dx, dw, db

    inputs = (x, w, b) if b is not None else (x, w)
    return _result("conv2d", inputs, np.ascontiguousarray(out), backward)


def maxpool2x(x):
    """
    2x2 stride-2 max pooling; ties go to the first window element in
    row-major order
    """
    n, c, h, w = _dims4(x, "maxpool2x")
    if h % 2:
        raise ShapeError(f"maxpool2x needs even height, got {h}", op="maxpool2x", dim=2, actual=h)
    if w % 2:
        raise ShapeError(f"maxpool2x needs even width, got {w}", op="maxpool2x", dim=3, actual=w)
    h2, w2 = h // 2, w // 2
    windows = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, idx, axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        return (gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _result("maxpool2x", (x,), out, backward)


def upsample_nearest2x(x):
    n, c, h, w = _dims4(x, "upsample_nearest2x")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result("upsample_nearest2x", (x,), out, backward)


def avgpool(x, factor):
    """
    non-overlapping average pooling by an integer factor
    """
    n, c, h, w = _dims4(x, "avgpool")
    if factor == 1:
        return x
    if h % factor or w % factor:
        raise ShapeError(f"avgpool factor {factor} does not divide {h}x{w}",
                         op="avgpool", dim=2 if h % factor else 3, expected=factor, actual=(h, w))
    hf, wf = h // factor, w // factor
    out = x.data.reshape(n, c, hf, factor, wf, factor).mean(axis=(3, 5))

    def backward(g):
        return (g.repeat(factor, axis=2).repeat(factor, axis=3) / (factor * factor),)

    return _result("avgpool", (x,), out, backward)


def replicate_pad(x, bottom=1, right=1):
    """
    extend the bottom rows / right columns by copying the edge
    """
    n, c, h, w = _dims4(x, "replicate_pad")
    out = np.pad(x.data, ((0, 0), (0, 0), (0, bottom), (0, right)), mode="edge")

    def backward(g):
        dx = g[:, :, :h, :w].copy()
        dx[:, :, h - 1, :] += g[:, :, h:, :w].sum(axis=2)
        dx[:, :, :, w - 1] += g[:, :, :h, w:].sum(axis=3)
        dx[:, :, h - 1, w - 1] += g[:, :, h:, w:].sum(axis=(2, 3))
        return (dx,)

    return _result("replicate_pad", (x,), out, backward)


def concat_channels(parts):
    """
    concatenate tensors along the channel axis in argument order
    """
    if not parts:
        raise ShapeError("concat_channels needs at least one part", op="concat_channels")
    n, _, h, w = _dims4(parts[0], "concat_channels")
    for i, part in enumerate(parts[1:], start=1):
        pn, _, ph, pw = _dims4(part, "concat_channels")
        if (pn, ph, pw) != (n, h, w):
            dim = 0 if pn != n else (2 if ph != h else 3)
            raise ShapeError(f"concat_channels part {i} has shape {part.shape}, expected "
                             f"batch/spatial ({n}, _, {h}, {w})",
                             op="concat_channels", part=i, dim=dim,
                             expected=(n, h, w), actual=(pn, ph, pw))
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.data for p in parts], axis=1)

    def backward(g):
        return tuple(np.split(g, offsets, axis=1))

    return _result("concat_channels", tuple(parts), out, backward)


def channel_slice(x, start, stop):
    n, c, h, w = _dims4(x, "channel_slice")
    out = x.data[:, start:stop].copy()

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        return (dx,)

    return _result("channel_slice", (x,), out, backward)


def split_channels(x, sizes):
    """
    inverse of concat_channels
    :param sizes: [list of int] channel count of every part
    """
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not add up to {x.shape[1]} channels",
                         op="split_channels", dim=1, expected=x.shape[1], actual=sum(sizes))
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [channel_slice(x, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def batchnorm(x, gamma, beta, running_mean, running_var, train,
              momentum=BN_MOMENTUM, eps=BN_EPS):
    """
    per-channel batch normalization over (n, h, w)
    :param gamma: [Tensor] scale (c,)
    :param beta: [Tensor] shift (c,)
    :param running_mean: [np array] (c,), updated in place in train mode
    :param running_var: [np array] (c,), updated in place in train mode
    :param train: [bool] use batch statistics (True) or running statistics
    """
    n, c, h, w = _dims4(x, "batchnorm")
    for label, t in (("gamma", gamma.data), ("beta", beta.data),
                     ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm {label} must have shape ({c},), got {t.shape}",
                             op="batchnorm", dim=1, expected=c, actual=t.shape)
    axes = (0, 2, 3)
    count = n * h * w
    g_ = gamma.data[None, :, None, None]

    if train:
        mean = x.data.mean(axis=axes)
        centered = x.data - mean[None, :, None, None]
        var = (centered ** 2).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv[None, :, None, None]
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * inv[None, :, None, None]
    out = g_ * xhat + beta.data[None, :, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        if train:
            dx = (inv[None, :, None, None] / count) * (
                count * dxhat
                - dxhat.sum(axis=axes)[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None])
        else:
            dx = dxhat * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return _result("batchnorm", (x, gamma, beta), out, backward)


def relu(x):
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype)

    def backward(g):
        return (g * mask,)

    return _result("relu", (x,), out, backward)


def sigmoid(x):
    out = expit(x.data)

    def backward(g):
        return (g * out * (1 - out),)

    return _result("sigmoid", (x,), out, backward)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}",
                         op="add", expected=a.shape, actual=b.shape)

    def backward(g):
        return g, g

    return _result("add", (a, b), a.data + b.data, backward)


def linear(x, w, b=None):
    """
    fully-connected layer
    :param x: [Tensor] (n, f_in)
    :param w: [Tensor] (f_out, f_in)
    :param b: [Tensor] (f_out,) or None
    """
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear cannot apply weight {w.shape} to input {x.shape}",
                         op="linear", dim=1, expected=w.shape[-1], actual=x.shape[-1])
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data[None, :]
    _count_macs(x.shape[0] * w.shape[0] * w.shape[1])

    def backward(g):
        return g @ w.data, g.T @ x.data, (g.sum(axis=0) if b is not None else None)

    inputs = (x, w, b) if b is not None else (x, w)
    return _result("linear", inputs, out, backward)


def global_avg_pool(x):
    n, c, h, w = _dims4(x, "global_avg_pool")
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return _result("global_avg_pool", (x,), out, backward)


def tensor_sum(x):
    def backward(g):
        return (np.full_like(x.data, g),)

    return _result("sum", (x,), np.asarray(x.data.sum()), backward)


def tensor_mean(x):
    size = x.data.size

    def backward(g):
        return (np.full_like(x.data, g / size),)

    return _result("mean", (x,), np.asarray(x.data.mean()), backward)


def _check_labels(labels, num_classes, op):
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise LabelError(f"{op} labels must be integers", op=op)
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels.min() if labels.min() < 0 else labels.max()
        raise LabelError(f"{op} label {bad} outside [0, {num_classes})",
                         op=op, value=int(bad), num_classes=num_classes)
    return labels


def _log_softmax(z, axis):
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits, labels):
    """
    mean cross entropy of class logits (n, K) against integer labels (n,)
    """
    if logits.ndim != 2:
        raise ShapeError("softmax_cross_entropy expects (n, K) logits",
                         op="softmax_cross_entropy", dim="ndim", expected=2, actual=logits.ndim)
    n, k = logits.shape
    labels = _check_labels(labels, k, "softmax_cross_entropy")
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}",
                         op="softmax_cross_entropy", dim=0, expected=n, actual=labels.shape)
    logp = _log_softmax(logits.data, axis=1)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (d * (g / n),)

    return _result("softmax_cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), backward)


def pixel_softmax_cross_entropy(logits, labels):
    """
    mean per-pixel cross entropy of logits (n, K, h, w) against a label map
    (n, h, w)
    """
    n, k, h, w = _dims4(logits, "pixel_softmax_cross_entropy")
    labels = _check_labels(labels, k, "pixel_softmax_cross_entropy")
    if labels.shape != (n, h, w):
        raise ShapeError(f"label map must have shape {(n, h, w)}, got {labels.shape}",
                         op="pixel_softmax_cross_entropy", expected=(n, h, w), actual=labels.shape)
    logp = _log_softmax(logits.data, axis=1)
    picked = np.take_along_axis(logp, labels[:, None], axis=1)
    count = n * h * w
    loss = -picked.sum() / count

    def backward(g):
        d = np.exp(logp)
        onehot = np.zeros_like(d)
        np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
        return ((d - onehot) * (g / count),)

    return _result("pixel_softmax_cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), backward)


def sigmoid_bce(logits, target):
    """
    mean binary cross entropy of sigmoid(logits) against a target map in
    [0, 1] of the same shape
    """
    target = np.asarray(target, dtype=logits.dtype)
    if target.shape != logits.shape:
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}",
                         op="sigmoid_bce", expected=logits.shape, actual=target.shape)
    if target.size and (target.min() < 0 or target.max() > 1):
        bad = target.min() if target.min() < 0 else target.max()
        raise LabelError(f"sigmoid_bce target value {bad} outside [0, 1]",
                         op="sigmoid_bce", value=float(bad))
    z = logits.data
    loss = (np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z)))).mean()
    size = z.size

    def backward(g):
        return ((expit(z) - target) * (g / size),)

    return _result("sigmoid_bce", (logits,), np.asarray(loss, dtype=logits.dtype), backward)


def he_normal(rng, shape, fan_in, dtype=np.float64):
    """
    zero-mean Gaussian with std sqrt(2 / fan_in)
    :param rng: [np.random.Generator]
    """
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


def sgd_step(params, grads, velocities, lr, weight_decay=0.0, momentum=SGD_MOMENTUM):
    """
    in-place SGD update: v <- momentum*v + grad + weight_decay*param;
    param <- param - lr*v
    :param params: [dict] name -> np array, updated in place
    :param grads: [dict] name -> np array or None (treated as zero)
    :param velocities: [dict] name -> momentum buffer, created on first use
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    for name, p in params.items():
        g = grads.get(name)
        v = velocities.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = momentum * v + weight_decay * p
        if g is not None:
            v = v + g
        velocities[name] = v
        p -= (lr * v).astype(p.dtype)
    return params


class SGD:
    """
    SGD with momentum and weight decay over named parameter tensors
    """

    def __init__(self, named_params, lr=0.1, weight_decay=0.0, momentum=SGD_MOMENTUM):
        self.params = dict(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.velocities = {}

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def step(self, lr=None):
        sgd_step({k: t.data for k, t in self.params.items()},
                 {k: t.grad for k, t in self.params.items()},
                 self.velocities,
                 self.lr if lr is None else lr,
                 self.weight_decay,
                 self.momentum)


def grad_check(f, x, eps=1e-5, floor=1e-6):
    """
    compare tape gradients with central finite differences
    :param f: [callable] Tensor -> scalar Tensor, built from tensor_core ops
    :param x: [Tensor] point at which to check (perturbed in place, restored)
    :param eps: [float] finite-difference step
    :param floor: [float] lower bound on the relative-error denominator so
    coordinates with (near) zero gradient are compared absolutely
    :return: [float] max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, floor)
    """
    requires_grad = x.requires_grad
    x.requires_grad = True
    x.zero_grad()
    try:
        with Tape() as tape:
            out = f(x)
            tape.backward(out)
    finally:
        x.requires_grad = requires_grad
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(x).data)
        flat[i] = orig - eps
        f_minus = float(f(x).data)
        flat[i] = orig
        numeric.flat[i] = (f_plus - f_minus) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = float(np.max(np.abs(analytic - numeric) / denom))
    logger.debug("grad_check over %d coordinates: max rel err %.3e", flat.size, err)
    return err
