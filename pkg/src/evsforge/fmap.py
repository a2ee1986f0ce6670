"""Lossless float-map container used for condition tensors, checkpoints and
ground-truth images.

Layout (little-endian): magic "FMAP" | u32 H, W, C | f32[H*W*C] row-major,
channel-fastest. Arrays round-trip bit-exactly as float32.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import BadMagic, TruncatedFile

MAGIC = b"FMAP"
_HEADER = struct.Struct("<4sIII")


def save_fmap(path, array) -> None:
    """Write an (H, W) or (H, W, C) array as float32."""
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"fmap arrays are HxWxC, got shape {a.shape}")
    h, w, c = a.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(MAGIC, h, w, c))
        f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    tmp.replace(path)


def load_fmap(path) -> np.ndarray:
    """Read an fmap file back as an (H, W, C) float32 array."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise TruncatedFile(path, len(data), _HEADER.size - len(data))
    magic, h, w, c = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagic(path, 0, magic)
    need = h * w * c * 4
    if len(data) - _HEADER.size < need:
        raise TruncatedFile(path, len(data), need - (len(data) - _HEADER.size))
    flat = np.frombuffer(data, dtype="<f4", count=h * w * c, offset=_HEADER.size)
    return flat.reshape(h, w, c).copy()
