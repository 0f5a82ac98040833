"""
Dataset ingestion (MNIST IDX, CIFAR-100 binary) and the synthetic
segmentation (seg) and spatial-transformation (spt) generators.

Every sample draws from its own counter-based stream: numpy's Philox4x64
bit generator keyed by ``SeedSequence(seed, spawn_key=(crc32(stream), index))``
where ``stream`` names the task and split (e.g. ``"seg/train"``). Generation is
therefore independent of order and can be split across worker processes.
"""
import concurrent.futures
import gzip
import hashlib
import logging
import struct
import zlib
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy import linalg
from scipy.ndimage import affine_transform, center_of_mass
from tqdm import tqdm

from multigrid_dl import checkpoint
from multigrid_dl.errors import FormatError

logger = logging.getLogger(__name__)

BACKGROUND = 10
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 2 + 3 * 32 * 32
CIFAR_PAD = 2
CIFAR_CROP = 32


def sample_rng(seed, stream, index):
    """
    :param seed: [int] dataset seed
    :param stream: [str] stream name, e.g. 'seg/train'
    :param index: [int] sample index
    :return: [np.random.Generator] Philox stream for this sample
    """
    key = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(stream.encode("utf-8")), int(index)))
    return np.random.Generator(np.random.Philox(key))


def _read_bytes(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _idx_header(buffer, path, magic, ndim):
    size = 4 * (ndim + 1)
    if len(buffer) < size:
        raise FormatError(f"truncated IDX header: {len(buffer)} of {size} bytes",
                          path=str(path), offset=len(buffer), expected=size, actual=len(buffer))
    found, *dims = struct.unpack(f">{ndim + 1}I", buffer[:size])
    if found != magic:
        raise FormatError(f"bad IDX magic 0x{found:08x}, expected 0x{magic:08x}",
                          path=str(path), offset=0, expected=magic, actual=found)
    expected = size + int(np.prod(dims))
    if len(buffer) != expected:
        raise FormatError(f"IDX file has {len(buffer)} bytes, header implies {expected}",
                          path=str(path), offset=min(len(buffer), expected),
                          expected=expected, actual=len(buffer))
    return dims, size


def load_mnist_idx(images_path, labels_path):
    """
    read an MNIST image/label IDX pair (optionally gzip-compressed)
    :return: [tuple] images (n, rows, cols) float64 in [0, 1], labels (n,) int64
    """
    raw = _read_bytes(images_path)
    (count, rows, cols), start = _idx_header(raw, images_path, IMAGE_MAGIC, 3)
    images = np.frombuffer(raw, dtype=np.uint8, offset=start).reshape(count, rows, cols) / 255.0

    raw = _read_bytes(labels_path)
    (label_count,), start = _idx_header(raw, labels_path, LABEL_MAGIC, 1)
    if label_count != count:
        raise FormatError(f"{label_count} labels for {count} images", path=str(labels_path),
                          offset=4, expected=count, actual=label_count)
    labels = np.frombuffer(raw, dtype=np.uint8, offset=start).astype(np.int64)
    logger.info("loaded %d MNIST digits of %dx%d from %s", count, rows, cols, images_path)
    return images, labels


@dataclass
class DigitBank:
    """source digits, their classes and intensity centroids (row, col)"""

    images: np.ndarray
    labels: np.ndarray
    centroids: np.ndarray = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.centroids is None:
            self.centroids = np.array([_centroid(d) for d in self.images])

    def __len__(self):
        return len(self.images)


def _centroid(image):
    if image.sum() <= 0:
        return (np.array(image.shape, dtype=np.float64) - 1) / 2
    return np.array(center_of_mass(image))


def bank_from_mnist(images_path, labels_path, limit=None):
    images, labels = load_mnist_idx(images_path, labels_path)
    if limit:
        images, labels = images[:limit], labels[:limit]
    return DigitBank(images, labels)


@dataclass(frozen=True)
class GenConfig:
    """
    generator settings; angles in degrees, scale as a factor
    """

    seed: int = 0
    train_count: int = 10000
    test_count: int = 1000
    digits: tuple = (3, 5)
    scale: tuple = (0.7, 1.3)
    rotation: tuple = (-45.0, 45.0)
    shear: tuple = (0.0, 0.0)
    canvas: int = 64
    overlap_cap: float = 0.30
    fg_threshold: float = 0.5
    translate: bool = True
    max_retries: int = 20
    workers: int = 1

    def count(self, split):
        return self.train_count if split == "train" else self.test_count


def seg_gen_config(**kwargs):
    return GenConfig(**kwargs)


def spt_gen_config(**kwargs):
    settings = dict(train_count=60000, test_count=10000, digits=(1, 1), shear=(-60.0, 60.0))
    settings.update(kwargs)
    return GenConfig(**settings)


@dataclass
class SegSample:
    image: np.ndarray
    labels: np.ndarray
    classes: tuple = ()
    max_overlap: float = 0.0

    def as_record(self):
        return {"image": self.image.astype(np.float32), "labels": self.labels.astype(np.uint8)}


@dataclass
class SptSample:
    image: np.ndarray
    target: np.ndarray
    label: int = 0

    def as_record(self):
        return {"image": self.image.astype(np.float32), "target": self.target.astype(np.float32),
                "class": np.asarray(self.label, dtype=np.uint8)}


def affine_matrix(scale, rotation, shear):
    """
    forward map in (row, col) coordinates: scale, then rotate, then shear
    """
    theta = np.deg2rad(rotation)
    rotate = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shear_m = np.array([[1.0, 0.0], [np.tan(np.deg2rad(shear)), 1.0]])
    return shear_m @ rotate @ (scale * np.eye(2))


def draw_affine(rng, cfg):
    """
    :return: [tuple] (scale, rotation degrees, shear degrees), drawn in that order
    """
    scale = rng.uniform(*cfg.scale)
    rotation = rng.uniform(*cfg.rotation)
    shear = rng.uniform(*cfg.shear)
    return scale, rotation, shear


def canvas_centre(canvas):
    return np.full(2, (canvas - 1) / 2.0)


def draw_centre(rng, cfg, matrix, digit):
    """
    where the digit's centroid lands: uniform over positions keeping the
    transformed bounding box on the canvas, or the canvas centre
    """
    rows, cols = np.nonzero(digit > 0)
    if not cfg.translate or rows.size == 0:
        return canvas_centre(cfg.canvas)
    centroid = _centroid(digit)
    corners = np.array([[r, c] for r in (rows.min(), rows.max()) for c in (cols.min(), cols.max())])
    moved = (corners - centroid) @ matrix.T
    lo = -moved.min(axis=0)
    hi = cfg.canvas - 1 - moved.max(axis=0)
    centre = canvas_centre(cfg.canvas)
    for axis in range(2):
        if lo[axis] <= hi[axis]:
            centre[axis] = rng.uniform(lo[axis], hi[axis])
    return centre


def warp_digit(digit, matrix, centre, canvas, centroid=None):
    """
    bilinear inverse-mapped warp of a digit onto a canvas: the digit's
    intensity centroid maps to `centre` and offsets from it are transformed by
    `matrix`
    """
    centroid = _centroid(digit) if centroid is None else centroid
    inverse = np.linalg.inv(matrix)
    offset = centroid - inverse @ centre
    return affine_transform(digit, inverse, offset=offset, output_shape=(canvas, canvas),
                            order=1, mode="constant", cval=0.0)


def foreground_overlap(a, b):
    """intersection of two foreground masks over the smaller one's area"""
    smaller = min(a.sum(), b.sum())
    if smaller == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / smaller)


def make_seg_sample(bank, cfg, stream, index):
    rng = sample_rng(cfg.seed, stream, index)
    k = int(rng.integers(cfg.digits[0], cfg.digits[1] + 1))
    canvas = np.zeros((cfg.canvas, cfg.canvas))
    labels = np.full((cfg.canvas, cfg.canvas), BACKGROUND, dtype=np.uint8)
    masks, classes = [], []
    for _ in range(k):
        pick = int(rng.integers(len(bank)))
        digit = bank.images[pick]
        for _attempt in range(cfg.max_retries):
            matrix = affine_matrix(*draw_affine(rng, cfg))
            centre = draw_centre(rng, cfg, matrix, digit)
            warped = warp_digit(digit, matrix, centre, cfg.canvas, bank.centroids[pick])
            fg = warped > cfg.fg_threshold
            if all(foreground_overlap(fg, m) <= cfg.overlap_cap for m in masks):
                break
        else:
            continue
        canvas = np.maximum(canvas, warped)
        labels[fg] = bank.labels[pick]
        masks.append(fg)
        classes.append(int(bank.labels[pick]))
    worst = max((foreground_overlap(a, b) for i, a in enumerate(masks) for b in masks[i + 1:]),
                default=0.0)
    return SegSample(canvas[None], labels, tuple(classes), worst)


def make_spt_sample(bank, cfg, stream, index):
    rng = sample_rng(cfg.seed, stream, index)
    pick = int(rng.integers(len(bank)))
    digit = bank.images[pick]
    matrix = affine_matrix(*draw_affine(rng, cfg))
    centre = draw_centre(rng, cfg, matrix, digit)
    image = warp_digit(digit, matrix, centre, cfg.canvas, bank.centroids[pick])
    target = warp_digit(digit, np.eye(2), canvas_centre(cfg.canvas), cfg.canvas, bank.centroids[pick])
    return SptSample(image[None], target[None], int(bank.labels[pick]))


def _generate(make, bank, cfg, stream, count):
    job = partial(make, bank, cfg, stream)
    indices = range(count)
    if cfg.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = pool.map(job, indices, chunksize=max(1, count // (4 * cfg.workers)))
            return list(tqdm(results, total=count, desc=stream))
    return [job(i) for i in tqdm(indices, total=count, desc=stream)]


def gen_seg_dataset(cfg, bank, split="train"):
    """
    paste transformed digits onto a blank canvas with max compositing,
    rejecting placements whose foreground overlap with an already pasted
    digit exceeds the cap; per-pixel labels take the last pasted class, 10
    marks background
    :return: [list of SegSample]
    """
    samples = _generate(make_seg_sample, bank, cfg, f"seg/{split}", cfg.count(split))
    placed = sum(len(s.classes) for s in samples)
    logger.info("generated %d seg/%s samples with %d digits (%.2f per image)", len(samples), split,
                placed, placed / max(len(samples), 1))
    return samples


def gen_spt_dataset(cfg, bank, split="train"):
    """
    one transformed digit per image; the target is the untransformed digit
    centred on the canvas
    :return: [list of SptSample]
    """
    samples = _generate(make_spt_sample, bank, cfg, f"spt/{split}", cfg.count(split))
    logger.info("generated %d spt/%s samples", len(samples), split)
    return samples


def audit_seg_dataset(samples, cfg):
    """
    :return: [dict] worst pairwise overlap and number of pixels whose label
    disagrees with the composited foreground
    """
    worst = max((s.max_overlap for s in samples), default=0.0)
    mismatched = sum(int(np.sum((s.labels != BACKGROUND) != (s.image[0] > cfg.fg_threshold)))
                     for s in samples)
    return {"max_overlap": worst, "label_mismatches": mismatched,
            "overlap_ok": worst <= cfg.overlap_cap}


def audit_spt_dataset(samples, cfg):
    """
    :return: [dict] largest distance between a target's intensity centroid
    and the canvas centre
    """
    centre = canvas_centre(cfg.canvas)
    offsets = [float(np.abs(_centroid(s.target[0]) - centre).max()) for s in samples]
    return {"max_centroid_offset": max(offsets, default=0.0)}


def save_samples(path, samples):
    checkpoint.write_dataset(path, [s.as_record() for s in samples])


def load_samples(path):
    """read an MGD1 archive back into sample objects (or raw records)"""
    records = checkpoint.read_dataset(path)
    samples = []
    for record in records:
        keys = tuple(record.keys())
        if keys == ("image", "labels"):
            samples.append(SegSample(record["image"], record["labels"]))
        elif keys == ("image", "target", "class"):
            samples.append(SptSample(record["image"], record["target"], int(record["class"])))
        else:
            samples.append(record)
    return samples


def dataset_digest(samples):
    """SHA-256 over the archive encoding of every sample"""
    digest = hashlib.sha256()
    for s in samples:
        record = s.as_record() if hasattr(s, "as_record") else s
        for name, array in record.items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()


@dataclass
class ArrayDataset:
    """
    stacked inputs and targets
    :param task: [str] 'classify' (targets (n,) int), 'seg' (targets (n, h, w)
    int) or 'spt' (targets (n, 1, h, w) float)
    """

    inputs: np.ndarray
    targets: np.ndarray
    task: str
    classes: np.ndarray = field(default=None)

    def __len__(self):
        return len(self.inputs)

    def batch(self, indices):
        return self.inputs[indices], self.targets[indices]

    def subset(self, indices):
        classes = None if self.classes is None else self.classes[indices]
        return ArrayDataset(self.inputs[indices], self.targets[indices], self.task, classes)

    def astype(self, dtype):
        targets = self.targets.astype(dtype) if self.task == "spt" else self.targets
        return ArrayDataset(self.inputs.astype(dtype), targets, self.task, self.classes)


def to_array_dataset(samples, dtype=np.float64):
    """stack seg or spt samples into an ArrayDataset"""
    if not samples:
        raise ValueError("cannot stack an empty sample list")
    inputs = np.stack([s.image for s in samples]).astype(dtype)
    if isinstance(samples[0], SegSample):
        return ArrayDataset(inputs, np.stack([s.labels for s in samples]).astype(np.int64), "seg")
    if isinstance(samples[0], SptSample):
        return ArrayDataset(inputs, np.stack([s.target for s in samples]).astype(dtype), "spt",
                            np.array([s.label for s in samples]))
    raise ValueError(f"cannot stack samples of type {type(samples[0]).__name__}")


def load_cifar100(path):
    """
    read a CIFAR-100 binary file: per record a coarse label byte, a fine
    label byte and 3072 pixel bytes (R, G, B planes of 32x32)
    :return: [tuple] images (n, 3, 32, 32) float64 in [0, 1], fine labels
    (n,), coarse labels (n,)
    """
    raw = _read_bytes(path)
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD * CIFAR_RECORD
        raise FormatError(f"{len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                          path=str(path), offset=whole, expected=whole + CIFAR_RECORD, actual=len(raw))
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    coarse = records[:, 0].astype(np.int64)
    fine = records[:, 1].astype(np.int64)
    images = records[:, 2:].reshape(-1, 3, 32, 32) / 255.0
    logger.info("loaded %d CIFAR-100 records from %s", len(images), path)
    return images, fine, coarse


def channel_stats(images):
    """per-channel mean and std over a training set (n, c, h, w)"""
    return images.mean(axis=(0, 2, 3)), images.std(axis=(0, 2, 3))


def standardize(images, mean, std):
    return (images - mean[None, :, None, None]) / std[None, :, None, None]


def zca_whiten(train, others=(), eps=1e-2):
    """
    ZCA whitening fitted on the training images and applied to every set
    :return: [list] whitened train followed by whitened others
    """
    flat = train.reshape(len(train), -1)
    mean = flat.mean(axis=0)
    centred = flat - mean
    cov = centred.T @ centred / len(flat)
    eigvals, eigvecs = linalg.eigh(cov)
    transform = eigvecs @ np.diag(1.0 / np.sqrt(eigvals + eps)) @ eigvecs.T
    return [((x.reshape(len(x), -1) - mean) @ transform).reshape(x.shape) for x in (train, *others)]


def pad_images(images, pad=CIFAR_PAD):
    return np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def preprocess_cifar(train, test, whiten="standardize"):
    """
    whiten with training-set statistics, then zero-pad to 36x36
    :param whiten: [str] 'standardize' (per-channel) or 'zca'
    :return: [tuple] padded train, padded test
    """
    if whiten == "zca":
        train, test = zca_whiten(train, (test,))
    elif whiten == "standardize":
        mean, std = channel_stats(train)
        train, test = standardize(train, mean, std), standardize(test, mean, std)
    else:
        raise ValueError(f"whiten must be 'standardize' or 'zca', got '{whiten}'")
    return pad_images(train), pad_images(test)


def random_crop_flip(batch, rng, size=CIFAR_CROP):
    """random size x size patches, each mirrored horizontally with probability 1/2"""
    n, _, h, w = batch.shape
    rows = rng.integers(0, h - size + 1, size=n)
    cols = rng.integers(0, w - size + 1, size=n)
    flips = rng.random(n) < 0.5
    out = np.empty(batch.shape[:2] + (size, size), dtype=batch.dtype)
    for i in range(n):
        patch = batch[i, :, rows[i]:rows[i] + size, cols[i]:cols[i] + size]
        out[i] = patch[:, :, ::-1] if flips[i] else patch
    return out


def center_crop(batch, size=CIFAR_CROP):
    h, w = batch.shape[2:]
    top, left = (h - size) // 2, (w - size) // 2
    return batch[:, :, top:top + size, left:left + size]
