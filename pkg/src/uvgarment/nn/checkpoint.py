"""Flat binary container for named float32 arrays.

Layout (little-endian): magic "UVGC", u32 version, u32 array count, then per
array: u32 name length, utf-8 name, u32 rank, u32 dims..., row-major float32
payload. Used for every checkpoint and UV-map file in the repo.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"UVGC"
VERSION = 1


def save_arrays(path, arrays):
    """Write an ordered dict of name -> ndarray as float32."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_arrays(path):
    """Read the container back as a dict of name -> float32 ndarray."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a UVGC container")
        version, count = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            payload = np.frombuffer(f.read(4 * n), dtype="<f4")
            out[name] = payload.reshape(dims).copy()
        return out
