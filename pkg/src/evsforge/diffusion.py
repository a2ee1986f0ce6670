"""Noise schedule, denoiser contracts and the wire-protocol client.

Two denoiser roles exist:
  * the pretrained scene model (the "primary" denoiser): predicts noise from
    (x_t, t, prompt, condition stack). Implementations: the closed-form toy
    denoiser and the remote client.
  * the particle model (the "secondary" in variational distillation):
    predicts noise from (x_t, t, condition, camera tag) and is trained one
    gradient step at a time against the injected noise.

The toy denoiser is the exact optimal denoiser for a point-mass data
distribution at mu = the condition's semantic channels, which makes the
distillation residual analytically checkable:
    eps_hat - eps = sqrt(abar / (1 - abar)) * (x0 - mu).
"""

from __future__ import annotations

import json
import os
import select
import socket
import struct
import subprocess
import time
from dataclasses import dataclass, field

import numpy as np

from .condition import ConditionMaps
from .errors import ProtocolError, ShapeMismatch, Timeout, TOutOfRange

DEFAULT_PROMPT = "This is photography of an urban street view, including cars, trees."

REQUEST_MAGIC = b"DNRQ"
RESPONSE_MAGIC = b"DNRS"
ERROR_MAGIC = b"DNER"


# ---------------------------------------------------------------------------
# schedule

@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear-beta DDPM schedule with continuous sampling bounds."""

    t_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    t_min: float = 0.02
    t_max: float = 0.98
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        betas = np.linspace(self.beta_start, self.beta_end, self.t_steps)
        abar = np.cumprod(1.0 - betas)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bar", abar)
        assert np.all(np.diff(abar) < 0), "alpha_bar must be strictly decreasing"
        assert abar[0] > 0.999 and abar[-1] < 0.01

    def step_of(self, t: float) -> int:
        """Continuous time in [t_min, t_max] -> discrete schedule index."""
        if not (self.t_min <= t <= self.t_max):
            raise TOutOfRange(f"t={t} outside [{self.t_min}, {self.t_max}]")
        return int(round(t * (self.t_steps - 1)))

    def alpha_bar_at(self, t: float) -> float:
        return float(self.alpha_bar[self.step_of(t)])

    def omega(self, t: float) -> float:
        """Distillation weight; the prevailing convention 1 - alpha_bar."""
        return 1.0 - self.alpha_bar_at(t)

    def sample_t(self, rng) -> float:
        return float(rng.uniform(self.t_min, self.t_max))


def perturb(schedule: DiffusionSchedule, x0, t: float, eps):
    """Forward-diffuse a clean image: sqrt(abar) x0 + sqrt(1-abar) eps."""
    abar = schedule.alpha_bar_at(t)
    return np.sqrt(abar) * np.asarray(x0) + np.sqrt(1.0 - abar) * np.asarray(eps)


# ---------------------------------------------------------------------------
# toy denoisers

class ToyDenoiser:
    """Closed-form optimal denoiser for point-mass data at the condition's
    semantic image. Ignores the prompt."""

    def __init__(self, schedule: DiffusionSchedule):
        self.schedule = schedule

    def predict(self, x_t, t, prompt, cond: ConditionMaps):
        abar = self.schedule.alpha_bar_at(t)
        mu = cond.S
        return (np.asarray(x_t) - np.sqrt(abar) * mu) / np.sqrt(1.0 - abar)


class BlurTargetDenoiser:
    """Geometry-branch toy denoiser: optimal denoiser pulling each map toward
    its own 5x5 Gaussian-blurred self, which flattens spikes and floaters."""

    KERNEL_SIGMA = 1.0

    def __init__(self, schedule: DiffusionSchedule):
        self.schedule = schedule
        x = np.arange(5) - 2.0
        k = np.exp(-0.5 * (x / self.KERNEL_SIGMA) ** 2)
        self._kernel = k / k.sum()

    def target(self, x0):
        """5x5 separable Gaussian blur with edge replication."""
        from scipy.ndimage import correlate1d

        x0 = np.asarray(x0, dtype=np.float64)
        out = correlate1d(x0, self._kernel, axis=0, mode="nearest")
        return correlate1d(out, self._kernel, axis=1, mode="nearest")

    def predict(self, x_t, t, x0):
        abar = self.schedule.alpha_bar_at(t)
        return (np.asarray(x_t) - np.sqrt(abar) * self.target(x0)) / np.sqrt(1.0 - abar)


# ---------------------------------------------------------------------------
# particle denoiser (the trainable side of variational distillation)

def time_embedding(t: float, dims: int = 8) -> np.ndarray:
    """Sin-cos features of the continuous time at octave frequencies."""
    freqs = 2.0 ** np.arange(dims // 2)
    ang = np.pi * freqs * t
    return np.concatenate([np.sin(ang), np.cos(ang)])


@dataclass
class ParticleConfig:
    lr: float = 0.05
    out_channels: int = 3
    cond_channels: int = 13
    t_dims: int = 8

    @property
    def feature_dim(self) -> int:
        return self.out_channels + self.cond_channels + self.t_dims + 1


class AffineParticleDenoiser:
    """Per-pixel affine noise model over [x_t | condition | time embedding | 1],
    one weight vector per output channel; the variational inner loop collapsed
    to a convex problem."""

    def __init__(self, config: ParticleConfig | None = None):
        self.config = config or ParticleConfig()
        self.weights = np.zeros((self.config.out_channels, self.config.feature_dim))

    def _features(self, x_t, t, cond: ConditionMaps) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        h, w, _ = x_t.shape
        emb = np.broadcast_to(time_embedding(t, self.config.t_dims), (h, w, self.config.t_dims))
        ones = np.ones((h, w, 1))
        return np.concatenate([x_t, cond.C, emb, ones], axis=2)

    def predict(self, x_t, t, cond: ConditionMaps, camera_tag=None, true_eps=None):
        f = self._features(x_t, t, cond)
        return f @ self.weights.T

    def train_step(self, x_t, t, cond: ConditionMaps, eps_target, camera_tag=None) -> float:
        """One gradient step on the mean squared prediction error; returns the
        pre-step loss."""
        f = self._features(x_t, t, cond)
        pred = f @ self.weights.T
        resid = pred - np.asarray(eps_target)
        n = resid.size
        loss = float(np.sum(resid ** 2) / n)
        grad = 2.0 / n * np.einsum("ijc,ijk->ck", resid, f)
        self.weights -= self.config.lr * grad
        return loss


class TrueEpsOracle:
    """Particle stand-in that returns the injected noise exactly; with it the
    variational gradient reduces to the plain distillation gradient."""

    def predict(self, x_t, t, cond, camera_tag=None, true_eps=None):
        if true_eps is None:
            raise ValueError("TrueEpsOracle needs the injected noise")
        return true_eps

    def train_step(self, x_t, t, cond, eps_target, camera_tag=None) -> float:
        return 0.0


# ---------------------------------------------------------------------------
# wire protocol

@dataclass
class DenoiserRequest:
    x_t: np.ndarray              # (C, H, W) float32
    t: float
    prompt: str = DEFAULT_PROMPT
    cond: np.ndarray | None = None  # (13, H, W) float32
    camera_tag: str = ""


@dataclass
class DenoiserResponse:
    eps_hat: np.ndarray          # (C, H, W) float32


_LEN = struct.Struct("<I")


def encode_request(req: DenoiserRequest) -> bytes:
    x = np.ascontiguousarray(req.x_t, dtype="<f4")
    cond = req.cond
    if cond is None:
        cond = np.zeros((13,) + x.shape[1:], dtype="<f4")
    cond = np.ascontiguousarray(cond, dtype="<f4")
    header = json.dumps({
        "shape": list(x.shape),
        "t": float(req.t),
        "prompt": req.prompt,
        "cond_shape": list(cond.shape),
        "camera_tag": req.camera_tag or "",
    }).encode("utf-8")
    return REQUEST_MAGIC + _LEN.pack(len(header)) + header + x.tobytes() + cond.tobytes()


def encode_response(eps_hat: np.ndarray) -> bytes:
    x = np.ascontiguousarray(eps_hat, dtype="<f4")
    header = json.dumps({"shape": list(x.shape)}).encode("utf-8")
    return RESPONSE_MAGIC + _LEN.pack(len(header)) + header + x.tobytes()


class _Deadline:
    def __init__(self, seconds):
        self.t0 = time.monotonic()
        self.seconds = seconds

    @property
    def remaining(self) -> float:
        left = self.seconds - (time.monotonic() - self.t0)
        if left <= 0:
            raise Timeout(f"denoiser did not answer within {self.seconds}s")
        return left


class TcpDenoiserConnection:
    """Blocking client for `tcp:<host>:<port>` endpoints; one request in
    flight at a time."""

    def __init__(self, address: str, timeout: float = 120.0):
        host, port = address.rsplit(":", 1)
        self.addr = (host, int(port))
        self.timeout = timeout
        self.sock = socket.create_connection(self.addr, timeout=timeout)

    def send(self, data: bytes) -> None:
        self.sock.sendall(data)

    def read_exact(self, n: int, deadline: _Deadline) -> bytes:
        chunks = []
        got = 0
        while got < n:
            self.sock.settimeout(deadline.remaining)
            try:
                chunk = self.sock.recv(n - got)
            except socket.timeout as e:
                raise Timeout(str(e)) from e
            if not chunk:
                raise ProtocolError(f"stream closed after {got} of {n} bytes")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def close(self) -> None:
        self.sock.close()


class StdioDenoiserConnection:
    """Client that spawns `stdio:<command>` and frames over its pipes."""

    def __init__(self, command: str, timeout: float = 120.0):
        self.timeout = timeout
        self.proc = subprocess.Popen(command, shell=True, stdin=subprocess.PIPE,
                                     stdout=subprocess.PIPE)

    def send(self, data: bytes) -> None:
        self.proc.stdin.write(data)
        self.proc.stdin.flush()

    def read_exact(self, n: int, deadline: _Deadline) -> bytes:
        fd = self.proc.stdout.fileno()
        chunks = []
        got = 0
        while got < n:
            ready, _, _ = select.select([fd], [], [], deadline.remaining)
            if not ready:
                continue
            chunk = os.read(fd, n - got)
            if not chunk:
                raise ProtocolError(f"stream closed after {got} of {n} bytes")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def close(self) -> None:
        if self.proc.stdin:
            self.proc.stdin.close()
        self.proc.terminate()
        self.proc.wait(timeout=10)


def open_connection(endpoint: str, timeout: float = 120.0):
    """endpoint is `tcp:<host>:<port>` or `stdio:<command>`."""
    if endpoint.startswith("tcp:"):
        return TcpDenoiserConnection(endpoint[4:], timeout)
    if endpoint.startswith("stdio:"):
        return StdioDenoiserConnection(endpoint[6:], timeout)
    raise ValueError(f"unknown denoiser endpoint {endpoint!r}")


def remote_denoise(conn, req: DenoiserRequest, timeout: float | None = None) -> DenoiserResponse:
    """One round trip over an open connection; validates framing and shape."""
    deadline = _Deadline(timeout if timeout is not None else conn.timeout)
    conn.send(encode_request(req))

    magic = conn.read_exact(4, deadline)
    (hlen,) = _LEN.unpack(conn.read_exact(4, deadline))
    if hlen > 1 << 24:
        raise ProtocolError(f"implausible header length {hlen}")
    raw_header = conn.read_exact(hlen, deadline)
    try:
        header = json.loads(raw_header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"bad response header: {e}") from e

    if magic == ERROR_MAGIC:
        message = header.get("message", repr(raw_header))
        raise ProtocolError(f"denoiser error: {message}")
    if magic != RESPONSE_MAGIC:
        raise ProtocolError(f"bad response magic {magic!r}")

    shape = tuple(int(v) for v in header["shape"])
    count = int(np.prod(shape))
    payload = conn.read_exact(count * 4, deadline)
    eps_hat = np.frombuffer(payload, dtype="<f4").reshape(shape)
    if shape != tuple(req.x_t.shape):
        raise ShapeMismatch(f"response shape {shape} != request {tuple(req.x_t.shape)}")
    return DenoiserResponse(eps_hat=eps_hat.copy())


class RemoteDenoiser:
    """Primary-denoiser adapter over the wire protocol; images are HxWxC
    internally, CxHxW on the wire."""

    def __init__(self, endpoint: str, timeout: float = 120.0):
        self.conn = open_connection(endpoint, timeout)

    def predict(self, x_t, t, prompt, cond: ConditionMaps, camera_tag=""):
        req = DenoiserRequest(
            x_t=np.asarray(x_t, dtype=np.float32).transpose(2, 0, 1),
            t=float(t),
            prompt=prompt,
            cond=np.asarray(cond.C, dtype=np.float32).transpose(2, 0, 1),
            camera_tag=camera_tag,
        )
        resp = remote_denoise(self.conn, req)
        return resp.eps_hat.transpose(1, 2, 0).astype(np.float64)

    def close(self):
        self.conn.close()
