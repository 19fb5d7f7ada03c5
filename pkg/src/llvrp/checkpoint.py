"""Versioned binary container for named float64 tensors.

Layout: the 6-byte magic ``LLVRP1``, then one block per tensor in
insertion order.  Each block is little-endian: u64 name length, UTF-8
name bytes, u64 rank, u64 per dimension, then the row-major float64
values.  The same container carries model weights, optimizer moments
(``adam/``-prefixed) and frozen context snapshots (``snapshot/``).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LLVRP1"


class CheckpointError(IOError):
    """Corrupt, truncated, or incompatible checkpoint contents."""


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            if arr.ndim > 3:
                raise CheckpointError(f"tensor {name!r} has rank {arr.ndim} > 3")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.tobytes())


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not an LLVRP1 checkpoint")
    out: dict[str, np.ndarray] = {}
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        if rank > 3:
            raise CheckpointError(f"{path}: tensor {name!r} has rank {rank} > 3")
        dims = tuple(struct.unpack("<Q", take(8))[0] for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        values = np.frombuffer(take(8 * count), dtype="<f8")
        out[name] = values.reshape(dims).astype(np.float64)
    return out
