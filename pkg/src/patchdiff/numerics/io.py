"""Little-endian tensor binary format.

Layout: magic ``b"PDTN"``, rank as int64, each dimension as int64, then the
float32 values in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"PDTN"


class TensorFormatError(ValueError):
    pass


def header_size(rank: int) -> int:
    return len(MAGIC) + 8 * (rank + 1)


def write_tensor(fh: BinaryIO, array: np.ndarray) -> int:
    """Write one tensor record; returns the number of bytes written."""
    a = np.ascontiguousarray(array, dtype="<f4")
    head = MAGIC + struct.pack(f"<q{a.ndim}q", a.ndim, *a.shape)
    fh.write(head)
    fh.write(a.tobytes(order="C"))
    return len(head) + a.nbytes


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    raw = fh.read(8)
    if len(raw) != 8:
        raise TensorFormatError("truncated header")
    (rank,) = struct.unpack("<q", raw)
    if not 0 <= rank <= 16:
        raise TensorFormatError(f"implausible rank {rank}")
    raw = fh.read(8 * rank)
    if len(raw) != 8 * rank:
        raise TensorFormatError("truncated header")
    shape = struct.unpack(f"<{rank}q", raw)
    count = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise TensorFormatError(f"expected {4 * count} data bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save(path: str | Path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
