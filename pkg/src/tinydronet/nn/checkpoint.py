"""Binary parameter checkpoints.

Layout (little-endian)::

    magic    4s   b"TDCK"
    version  u32
    count    u32
    count x { name_len u16, name utf-8, ndim u8, dims u32 * ndim, data f32 * prod(dims) }
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TDCK"
VERSION = 1


def save_checkpoint(params: dict, path: str | Path) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(params))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = name.encode()
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
    return params
