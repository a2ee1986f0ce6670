"""Server-side framing for the denoiser wire protocol.

Frames (little-endian): magic (4 bytes) | u32 header length | UTF-8 JSON
header | float32 payloads. Request magic "DNRQ" carries x_t then the
13-channel condition; response magic "DNRS" carries eps_hat; protocol faults
are answered with a "DNER" frame whose header is {"message": ...}.

The condition stack is channel-ordered [instance rotations (9) | semantics (3)
| depth (1)]; rotation channels must never be interpolated when resizing.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

REQUEST_MAGIC = b"DNRQ"
RESPONSE_MAGIC = b"DNRS"
ERROR_MAGIC = b"DNER"

COND_CHANNELS = 13
ROTATION_CHANNELS = 9

_LEN = struct.Struct("<I")
MAX_HEADER = 1 << 24


class FrameError(Exception):
    """Malformed or truncated frame."""


@dataclass
class Request:
    x_t: np.ndarray            # (C, H, W) float32
    t: float
    prompt: str
    cond: np.ndarray           # (13, H, W) float32
    camera_tag: str


def read_exact(read, n: int) -> bytes:
    """Pull exactly n bytes from a read(n)->bytes callable."""
    chunks = []
    got = 0
    while got < n:
        chunk = read(n - got)
        if not chunk:
            raise FrameError(f"stream closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_request(read) -> Request | None:
    """Parse one request frame; None on clean EOF before any bytes."""
    first = read(4)
    if not first:
        return None
    if len(first) < 4:
        first += read_exact(read, 4 - len(first))
    if first != REQUEST_MAGIC:
        raise FrameError(f"bad request magic {first!r}")
    (hlen,) = _LEN.unpack(read_exact(read, 4))
    if hlen > MAX_HEADER:
        raise FrameError(f"implausible header length {hlen}")
    try:
        header = json.loads(read_exact(read, hlen).decode("utf-8"))
        shape = tuple(int(v) for v in header["shape"])
        cond_shape = tuple(int(v) for v in header["cond_shape"])
    except (KeyError, ValueError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FrameError(f"bad request header: {e}") from e
    if len(shape) != 3 or len(cond_shape) != 3:
        raise FrameError(f"shapes must be rank 3, got {shape} / {cond_shape}")
    if cond_shape[0] != COND_CHANNELS:
        raise FrameError(f"condition must have {COND_CHANNELS} channels, "
                         f"got {cond_shape[0]}")
    x = np.frombuffer(read_exact(read, int(np.prod(shape)) * 4),
                      dtype="<f4").reshape(shape)
    cond = np.frombuffer(read_exact(read, int(np.prod(cond_shape)) * 4),
                         dtype="<f4").reshape(cond_shape)
    return Request(x_t=x.copy(), t=float(header.get("t", 0.5)),
                   prompt=str(header.get("prompt", "")),
                   cond=cond.copy(), camera_tag=str(header.get("camera_tag", "")))


def response_frame(eps_hat: np.ndarray) -> bytes:
    x = np.ascontiguousarray(eps_hat, dtype="<f4")
    header = json.dumps({"shape": list(x.shape)}).encode("utf-8")
    return RESPONSE_MAGIC + _LEN.pack(len(header)) + header + x.tobytes()


def error_frame(message: str) -> bytes:
    header = json.dumps({"message": message}).encode("utf-8")
    return ERROR_MAGIC + _LEN.pack(len(header)) + header


def resize_condition(cond: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize a (13, H, W) condition stack to the model's resolution.

    Rotation channels use nearest-neighbor (interpolating rotation vectors
    breaks orthonormality); semantics and depth use bilinear.
    """
    c, h, w = cond.shape
    if (h, w) == (height, width):
        return cond
    out = np.empty((c, height, width), dtype=cond.dtype)

    ys = (np.arange(height) + 0.5) * h / height - 0.5
    xs = (np.arange(width) + 0.5) * w / width - 0.5

    yn = np.clip(np.round(ys).astype(int), 0, h - 1)
    xn = np.clip(np.round(xs).astype(int), 0, w - 1)
    out[:ROTATION_CHANNELS] = cond[:ROTATION_CHANNELS][:, yn][:, :, xn]

    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    for ch in range(ROTATION_CHANNELS, c):
        plane = cond[ch]
        top = plane[y0][:, x0] * (1 - fx) + plane[y0][:, x1] * fx
        bot = plane[y1][:, x0] * (1 - fx) + plane[y1][:, x1] * fx
        out[ch] = top * (1 - fy[:, 0])[:, None] + bot * fy[:, 0][:, None]
    return out
