"""HMT1 binary tensor container.

Layout: magic bytes ``HMT1``, one dtype code byte (0 = float32,
1 = float64), one rank byte, then rank little-endian u32 extents, then the
row-major little-endian payload. Used for dataset rasters and as the
per-tensor block inside checkpoints.
"""

from __future__ import annotations

import struct
from io import BytesIO
from os import PathLike
from typing import BinaryIO

import numpy as np

from .errors import DataError

MAGIC = b"HMT1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> int:
    """Write one array as an HMT1 block; returns the number of bytes written."""
    arr = np.asarray(arr)
    if not arr.flags.c_contiguous:
        # note: ascontiguousarray would promote rank 0 to rank 1
        arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODE_FOR:
        raise DataError(f"HMT1 supports f32/f64 only, got {arr.dtype}")
    if arr.ndim > 4:
        raise DataError(f"HMT1 supports rank <= 4, got {arr.ndim}")
    header = MAGIC + struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    fh.write(header)
    fh.write(payload)
    return len(header) + len(payload)


def read_tensor(fh: BinaryIO) -> np.ndarray:
    """Read one HMT1 block from the current stream position."""
    magic = fh.read(4)
    if magic != MAGIC:
        raise DataError(f"bad HMT1 magic {magic!r}")
    code, rank = struct.unpack("<BB", _read_exact(fh, 2))
    if code not in _DTYPE_CODES:
        raise DataError(f"unknown HMT1 dtype code {code}")
    if rank > 4:
        raise DataError(f"HMT1 rank {rank} > 4")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape)) if shape else 1
    data = _read_exact(fh, count * dtype.itemsize)
    return np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.base)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise DataError(f"truncated HMT1 block: wanted {n} bytes, got {len(data)}")
    return data


def save(path: str | PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load(path: str | PathLike) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            return read_tensor(fh)
    except FileNotFoundError as e:
        raise DataError(f"missing tensor file: {path}") from e


def dumps(arr: np.ndarray) -> bytes:
    buf = BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def loads(blob: bytes) -> np.ndarray:
    return read_tensor(BytesIO(blob))
