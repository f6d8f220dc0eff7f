"""Binary tensor files: magic ``DVDT``, u32 rank, u32 extents, f64 data.

Little-endian throughout; payload is row-major float64.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DVDT"


def save_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor file (bad magic {raw[:4]!r})")
    (rank,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    expected = offset + 8 * count
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    arr = data.reshape(shape).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: tensor contains non-finite values")
    return arr
