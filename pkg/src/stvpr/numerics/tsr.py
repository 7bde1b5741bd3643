"""TSR tensor container.

Layout: 8-byte magic (``TSR0`` padded with NUL), little-endian u32 rank,
``rank`` little-endian u64 dims, then the row-major little-endian float32
payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import InputError

MAGIC = b"TSR0\x00\x00\x00\x00"


def encode(array) -> bytes:
    arr = np.asarray(array, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode(buf: bytes) -> np.ndarray:
    if buf[:8] != MAGIC:
        raise InputError("not a TSR container (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 8)
    dims = struct.unpack_from(f"<{rank}Q", buf, 12)
    offset = 12 + 8 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(buf) - offset != 4 * count:
        raise InputError(f"TSR payload holds {len(buf) - offset} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)


def save(path, array):
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())
