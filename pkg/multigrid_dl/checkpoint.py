"""
Binary tensor containers.

MGN1 (checkpoints)::

    b"MGN1" | version u32 | tensor count u32 | block * count

MGD1 (dataset archives)::

    b"MGD1" | version u32 | sample count u32 | blocks per sample u32 | block * (count * blocks)

block::

    name length u32 | UTF-8 name | dtype tag u32 | ndim u32 | dims u32 * ndim | raw values

All integers and values are little-endian. Dtype tags: 0 = f32, 1 = f64,
2 = u8, 3 = i64 (the integer tags carry label maps and class indices).
"""
import logging
import struct
from collections import OrderedDict

import numpy as np

from multigrid_dl.errors import FormatError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MGN1"
DATASET_MAGIC = b"MGD1"
VERSION = 1

DTYPE_TAGS = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("u1"),
    3: np.dtype("<i8"),
}
TAG_OF = {(dt.kind, dt.itemsize): tag for tag, dt in DTYPE_TAGS.items()}


def _encode_block(name, array):
    array = np.asarray(array)
    tag = TAG_OF.get((array.dtype.kind, array.dtype.itemsize))
    if tag is None:
        raise FormatError(f"cannot store dtype {array.dtype} for tensor '{name}'",
                          expected=sorted(str(d) for d in DTYPE_TAGS.values()),
                          actual=str(array.dtype))
    encoded = name.encode("utf-8")
    head = struct.pack(f"<I{len(encoded)}sII", len(encoded), encoded, tag, array.ndim)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    values = np.ascontiguousarray(array, dtype=DTYPE_TAGS[tag]).tobytes()
    return head + dims + values


class _Reader:
    """sequential reader over a byte buffer that reports offsets on failure"""

    def __init__(self, buffer, path):
        self.buffer = buffer
        self.path = str(path)
        self.offset = 0

    def take(self, count, what):
        end = self.offset + count
        if end > len(self.buffer):
            raise FormatError(f"truncated {what}: needed {count} bytes at offset "
                              f"{self.offset}, file has {len(self.buffer)}",
                              path=self.path, offset=self.offset, expected=end,
                              actual=len(self.buffer))
        chunk = self.buffer[self.offset:end]
        self.offset = end
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def magic(self, expected):
        start = self.offset
        found = self.take(len(expected), "magic")
        if found != expected:
            raise FormatError(f"bad magic {found!r}, expected {expected!r}",
                              path=self.path, offset=start, expected=expected, actual=found)

    def block(self):
        name_len = self.u32("name length")
        name = self.take(name_len, "tensor name").decode("utf-8")
        tag_at = self.offset
        tag = self.u32("dtype tag")
        if tag not in DTYPE_TAGS:
            raise FormatError(f"unknown dtype tag {tag} for tensor '{name}'",
                              path=self.path, offset=tag_at, expected=sorted(DTYPE_TAGS), actual=tag)
        ndim = self.u32("ndim")
        dims = struct.unpack(f"<{ndim}I", self.take(4 * ndim, "dims"))
        dtype = DTYPE_TAGS[tag]
        count = int(np.prod(dims, dtype=np.int64))
        raw = self.take(count * dtype.itemsize, f"values of '{name}'")
        return name, np.frombuffer(raw, dtype=dtype).reshape(dims).copy()

    def finish(self):
        if self.offset != len(self.buffer):
            raise FormatError(f"{len(self.buffer) - self.offset} trailing bytes",
                              path=self.path, offset=self.offset, expected=self.offset,
                              actual=len(self.buffer))


def write_tensors(path, named_arrays):
    """
    write named arrays to an MGN1 file
    :param path: [str or Path] output file
    :param named_arrays: [dict or list of pairs] name -> array, in file order
    """
    items = list(named_arrays.items()) if hasattr(named_arrays, "items") else list(named_arrays)
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", VERSION, len(items))]
    parts.extend(_encode_block(name, array) for name, array in items)
    with open(path, "wb") as f:
        f.write(b"".join(parts))
    logger.debug("wrote %d tensors to %s", len(items), path)


def read_tensors(path):
    """
    :param path: [str or Path] MGN1 file
    :return: [OrderedDict] name -> array, in file order
    """
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)
    reader.magic(CHECKPOINT_MAGIC)
    version_at = reader.offset
    version = reader.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}",
                          path=str(path), offset=version_at, expected=VERSION, actual=version)
    count = reader.u32("tensor count")
    tensors = OrderedDict(reader.block() for _ in range(count))
    reader.finish()
    return tensors


def save_checkpoint(model, path):
    """write a model's parameters and batchnorm buffers"""
    write_tensors(path, model.state_dict())
    logger.info("saved checkpoint %s", path)


def load_checkpoint(model, path):
    """restore a model's parameters and buffers in place"""
    model.load_state_dict(read_tensors(path))
    logger.info("loaded checkpoint %s", path)
    return model


def write_dataset(path, records):
    """
    write an MGD1 archive
    :param records: [list of dict] one dict per sample mapping block name to
    array; every record must have the same block names in the same order
    """
    keys = list(records[0].keys()) if records else []
    parts = [DATASET_MAGIC, struct.pack("<III", VERSION, len(records), len(keys))]
    for i, record in enumerate(records):
        if list(record.keys()) != keys:
            raise FormatError(f"sample {i} has blocks {list(record.keys())}, expected {keys}",
                              path=str(path), expected=keys, actual=list(record.keys()))
        parts.extend(_encode_block(name, record[name]) for name in keys)
    with open(path, "wb") as f:
        f.write(b"".join(parts))
    logger.info("wrote %d samples to %s", len(records), path)


def read_dataset(path):
    """
    :param path: [str or Path] MGD1 archive
    :return: [list of OrderedDict] one record per sample
    """
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)
    reader.magic(DATASET_MAGIC)
    version_at = reader.offset
    version = reader.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}",
                          path=str(path), offset=version_at, expected=VERSION, actual=version)
    count = reader.u32("sample count")
    blocks = reader.u32("blocks per sample")
    records = [OrderedDict(reader.block() for _ in range(blocks)) for _ in range(count)]
    reader.finish()
    return records
