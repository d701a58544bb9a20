"""Tensor container files.

Layout: magic ``VCT1``, u32 rank, ``rank`` x u64 extents, then the values as
little-endian float32 in row-major order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VCT1"


class ContainerError(ValueError):
    pass


def to_bytes(arr) -> bytes:
    arr = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise ContainerError("not a VCT1 container")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 8 * rank
    if len(buf) < off:
        raise ContainerError("truncated header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 8)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) != off + 4 * count:
        raise ContainerError(f"payload size mismatch for shape {shape}")
    return np.frombuffer(buf, dtype="<f4", offset=off, count=count).reshape(shape).astype(np.float32)


def save(path, arr) -> None:
    Path(path).write_bytes(to_bytes(arr))


def load(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
