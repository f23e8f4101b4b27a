"""Binary tensor archives.

Layout (little-endian): magic ``b"DVC1"`` followed by records until EOF, each
``u32 name_len | name (UTF-8) | u32 rank | u64 dims[rank] | f32 data``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"DVC1"


def save(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            if arr.ndim:
                fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise InputError(f"{path}: not a DVC1 archive")
    out: dict[str, np.ndarray] = {}
    pos = 4
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, pos) if rank else ()
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        out[name] = data.astype(np.float32)
    return out


def with_prefix(prefix: str, tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v for k, v in tensors.items()}


def strip_prefix(prefix: str, tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
