"""MCT1 binary tensor files.

Layout (little-endian): ``b"MCT1"``, u32 rank, rank x u32 extents, then the
row-major float64 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import TensorFormatError

MAGIC = b"MCT1"


def encode(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor starting at ``offset``; returns it and the end offset."""
    if len(buf) - offset < 8:
        raise TensorFormatError(f"truncated header: expected at least 8 bytes, got {len(buf) - offset}")
    magic = buf[offset:offset + 4]
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    if len(buf) - pos < 4 * rank:
        raise TensorFormatError(f"truncated extents: expected {4 * rank} bytes, got {len(buf) - pos}")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    need = 8 * count
    have = len(buf) - pos
    if have < need:
        raise TensorFormatError(
            f"truncated payload: expected {pos + need - offset} bytes, got {len(buf) - offset}")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
    return arr, pos + need


def save(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def load(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode(buf)
    if end != len(buf):
        raise TensorFormatError(f"trailing data: expected {end} bytes, got {len(buf)}")
    return arr
