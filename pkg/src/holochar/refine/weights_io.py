"""Versioned binary weight container.

Layout (all integers little-endian):

    magic "HCWT" | u32 version | u32 tensor count
    per tensor: u16 name length | name utf-8 | u8 ndim | u32 dims...
    payloads in table order, float32 little-endian, C order
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import ValidationError
from .ops import Param

MAGIC = b"HCWT"
VERSION = 1


def save_weights(path, params: list[Param]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", p.value.ndim))
            fh.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        for p in params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValidationError(f"{path}: not a weight container (bad magic)")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValidationError(f"{path}: unsupported container version {version}")
        table = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            table.append((name, shape))
        out = {}
        for name, shape in table:
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * n)
            if len(raw) != 4 * n:
                raise ValidationError(f"{path}: truncated payload for {name}")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        return out


def load_weights_into(params: list[Param], path) -> None:
    """Load a container into existing parameters, validating names and shapes."""
    data = load_weights(path)
    for p in params:
        if p.name not in data:
            raise ValidationError(f"{path}: missing tensor {p.name}")
        arr = data[p.name]
        if tuple(arr.shape) != tuple(p.value.shape):
            raise ValidationError(f"{path}: {p.name} has shape {arr.shape}, model expects {p.value.shape}")
        p.value[...] = arr.astype(p.value.dtype)
