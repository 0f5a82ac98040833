"""
Occluder attention maps and gradient-based receptive-footprint measurement.
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.ndimage import center_of_mass
from scipy.stats import pearsonr

from multigrid_dl import tensor_core as tc
from multigrid_dl.errors import ShapeError
from multigrid_dl.model_zoo import probe_stack

logger = logging.getLogger(__name__)

GRAD_THRESHOLD = 1e-12


@dataclass(frozen=True)
class AttentionConfig:
    """
    :param occluder: [int] side of the noise square
    :param probes: [tuple] output locations (row, col)
    :param window: [int] side of the probe window
    :param stride: [int] occluder sweep stride
    :param seed: [int] seed of the noise square
    :param chunk: [int] occluded images per forward pass
    """

    occluder: int = 8
    probes: tuple = ((32, 32),)
    window: int = 3
    stride: int = 1
    seed: int = 0
    chunk: int = 64


@dataclass
class AttentionMap:
    probe: tuple
    raw: np.ndarray
    normalized: np.ndarray


def occluder_noise(cfg, channels):
    rng = np.random.default_rng(cfg.seed)
    return rng.uniform(0.0, 1.0, size=(channels, cfg.occluder, cfg.occluder))


def _check_probe(probe, window, shape):
    half = window // 2
    r, c = probe
    h, w = shape
    if not (half <= r < h - half and half <= c < w - half):
        raise ShapeError(f"probe window {window}x{window} at {probe} falls outside the {h}x{w} output",
                         op="attention_map", expected=(h, w), actual=probe)


def attention_map(model, image, cfg):
    """
    sweep a fixed noise square over the image and record, at the square's
    centre pixel, the largest absolute output change inside each probe window
    :param model: object with predict(batch) -> (n, K, h, w)
    :param image: [np array] (c, h, w)
    :param cfg: [AttentionConfig]
    :return: [list of AttentionMap] one per probe; normalized maps are
    scaled by their own maximum
    """
    image = np.asarray(image)
    channels, h, w = image.shape
    if cfg.occluder > min(h, w):
        raise ShapeError(f"occluder {cfg.occluder} does not fit a {h}x{w} image",
                         op="attention_map", expected=(h, w), actual=cfg.occluder)
    baseline = model.predict(image[None])[0]
    for probe in cfg.probes:
        _check_probe(probe, cfg.window, baseline.shape[-2:])
    noise = occluder_noise(cfg, channels).astype(image.dtype)
    half = cfg.window // 2
    windows = [(slice(r - half, r + half + 1), slice(c - half, c + half + 1)) for r, c in cfg.probes]

    positions = [(top, left) for top in range(0, h - cfg.occluder + 1, cfg.stride)
                 for left in range(0, w - cfg.occluder + 1, cfg.stride)]
    raw = np.zeros((len(cfg.probes), h, w))
    centre = cfg.occluder // 2
    for start in range(0, len(positions), cfg.chunk):
        chunk = positions[start:start + cfg.chunk]
        batch = np.repeat(image[None], len(chunk), axis=0)
        for i, (top, left) in enumerate(chunk):
            batch[i, :, top:top + cfg.occluder, left:left + cfg.occluder] = noise
        change = np.abs(model.predict(batch) - baseline[None])
        for i, (top, left) in enumerate(chunk):
            for p, (rows, cols) in enumerate(windows):
                raw[p, top + centre, left + centre] = change[i, ..., rows, cols].max()

    maps = []
    for probe, values in zip(cfg.probes, raw):
        peak = values.max()
        maps.append(AttentionMap(tuple(probe), values, values / peak if peak > 0 else values.copy()))
    return maps


def attention_maps(model, images, cfg):
    """attention_map over a batch of images"""
    return [attention_map(model, image, cfg) for image in images]


def attention_centroid(values):
    """(row, col) centre of mass of a map; NaN for an all-zero map"""
    if not np.any(values > 0):
        return np.full(2, np.nan)
    return np.array(center_of_mass(values))


def centroid_correlation(digit_centroids, attention_centroids):
    """
    Pearson correlation between where the digits are and where the maps
    point, over rows and columns together
    """
    digits = np.asarray(digit_centroids, dtype=np.float64)
    attention = np.asarray(attention_centroids, dtype=np.float64)
    statistic, _ = pearsonr(digits.T.ravel(), attention.T.ravel())
    return float(statistic)


@dataclass
class Footprint:
    top: int
    left: int
    bottom: int
    right: int

    @property
    def height(self):
        return self.bottom - self.top + 1

    @property
    def width(self):
        return self.right - self.left + 1

    @property
    def side(self):
        return max(self.height, self.width)


def receptive_footprint(model, location, seed=0):
    """
    bounding box of input pixels whose gradient reaches one output location,
    measured on a copy with absolute-valued weights and unit batchnorm
    statistics so contributions cannot cancel
    :param model: [Model] network with a spatial output
    :param location: [tuple] (row, col) on the output grid
    :return: [Footprint or None] None when no input pixel contributes
    """
    probe = model.copy()
    for _, t in probe.named_parameters():
        np.abs(t.data, out=t.data)
    for name, buffer in probe.named_buffers():
        buffer[...] = 0.0 if name.endswith(".mean") else 1.0

    rng = np.random.default_rng(seed)
    x = tc.Tensor(rng.uniform(0.1, 1.0, size=(1, *probe.input_size)).astype(probe.dtype),
                  requires_grad=True)
    with tc.Tape() as tape:
        out = probe.forward(x, train=False)
        if out.ndim != 4:
            raise ShapeError("receptive_footprint needs a spatial output", op="receptive_footprint",
                             expected=4, actual=out.ndim)
        grad = np.zeros_like(out.data)
        grad[0, :, location[0], location[1]] = 1.0
        tape.backward(out, grad)

    rows, cols = np.nonzero(np.abs(x.grad[0]).max(axis=0) > GRAD_THRESHOLD)
    if rows.size == 0:
        return None
    return Footprint(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))


def footprint_table(max_depth, input_size=(64, 64), levels=3, width=4, location=None):
    """
    footprint side against depth for plain 3x3 stacks and multigrid stacks
    :return: [pd DataFrame] columns depth, single_grid, multigrid
    """
    location = location or (input_size[0] // 2, input_size[1] // 2)
    rows = []
    for depth in range(1, max_depth + 1):
        single = receptive_footprint(probe_stack("single", depth, input_size=input_size), location)
        multi = receptive_footprint(probe_stack("multigrid", depth, levels, width, input_size=input_size),
                                    location)
        rows.append({"depth": depth, "single_grid": single.side, "multigrid": multi.side})
        logger.debug("depth %d: single %d, multigrid %d", depth, single.side, multi.side)
    return pd.DataFrame(rows, columns=["depth", "single_grid", "multigrid"])


def write_pgm(path, values):
    """binary portable graymap (P5, maxval 255) of a map in [0, 1]"""
    values = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    pixels = np.round(values * 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def write_map_csv(path, values):
    pd.DataFrame(values).to_csv(path, index=False, lineterminator="\n")
