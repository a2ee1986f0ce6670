import json
import socket
import struct
import threading

import numpy as np
import pytest

from evsforge.condition import ConditionMaps, pack_control
from evsforge.diffusion import (
    AffineParticleDenoiser,
    BlurTargetDenoiser,
    DenoiserRequest,
    DiffusionSchedule,
    ParticleConfig,
    TcpDenoiserConnection,
    ToyDenoiser,
    TrueEpsOracle,
    encode_request,
    perturb,
    remote_denoise,
    time_embedding,
)
from evsforge.errors import ProtocolError, ShapeMismatch, TOutOfRange


@pytest.fixture(scope="module")
def schedule():
    return DiffusionSchedule()


def cond_from_semantic(s):
    h, w, _ = s.shape
    d = np.zeros((h, w, 1))
    r = np.zeros((h, w, 9))
    return ConditionMaps(S=s, D=d, R=r, C=pack_control(s, d, r))


def test_schedule_invariants(schedule):
    assert np.all(np.diff(schedule.alpha_bar) < 0)
    assert schedule.alpha_bar[0] > 0.999
    assert schedule.alpha_bar[-1] < 0.01


def test_perturb_out_of_range(schedule):
    x = np.zeros((2, 2, 3))
    with pytest.raises(TOutOfRange):
        perturb(schedule, x, 0.999, x)
    with pytest.raises(TOutOfRange):
        perturb(schedule, x, 0.0, x)


def test_perturb_near_identity_limit(schedule):
    # at t_min the schedule gives sqrt(1 - abar) ~ 0.0792, so the deviation
    # for eps bounded by 1 stays under that plus the sqrt(abar) shrinkage
    rng = np.random.default_rng(0)
    x0 = rng.random((8, 8, 3))
    eps = rng.uniform(-1.0, 1.0, size=(8, 8, 3))
    x_t = perturb(schedule, x0, schedule.t_min, eps)
    abar = schedule.alpha_bar_at(schedule.t_min)
    bound = (1.0 - np.sqrt(abar)) * np.max(np.abs(x0)) + np.sqrt(1.0 - abar)
    assert np.max(np.abs(x_t - x0)) <= bound + 1e-12
    assert bound < 0.085


def test_perturb_zero_noise_exact(schedule):
    rng = np.random.default_rng(1)
    x0 = rng.random((4, 4, 3))
    t = 0.5
    x_t = perturb(schedule, x0, t, np.zeros_like(x0))
    abar = schedule.alpha_bar_at(t)
    assert np.array_equal(x_t, np.sqrt(abar) * x0)


def test_perturb_variance_monte_carlo(schedule):
    rng = np.random.default_rng(1234)
    t = 0.61
    abar = schedule.alpha_bar_at(t)
    x0 = np.full((100, 100, 1), 0.37)
    eps = rng.normal(size=(100, 100, 1))
    resid = perturb(schedule, x0, t, eps) - np.sqrt(abar) * x0
    var = float(np.var(resid))
    assert abs(var - (1 - abar)) < 0.03 * (1 - abar)


def test_toy_denoiser_residual_identity(schedule):
    rng = np.random.default_rng(7)
    toy = ToyDenoiser(schedule)
    mu = rng.random((6, 6, 3))
    cond = cond_from_semantic(mu)

    # converged case: x0 == mu -> residual exactly zero
    eps = rng.normal(size=mu.shape)
    t = 0.4
    x_t = perturb(schedule, mu, t, eps)
    res = toy.predict(x_t, t, "", cond) - eps
    assert np.max(np.abs(res)) < 1e-12

    # closed form for five random offsets and times
    for _ in range(5):
        delta = rng.normal(size=mu.shape)
        t = schedule.sample_t(rng)
        abar = schedule.alpha_bar_at(t)
        eps = rng.normal(size=mu.shape)
        x_t = perturb(schedule, mu + delta, t, eps)
        res = toy.predict(x_t, t, "", cond) - eps
        expect = np.sqrt(abar / (1 - abar)) * delta
        assert np.allclose(res, expect, atol=1e-10)


def test_toy_residual_invariant_to_eps(schedule):
    rng = np.random.default_rng(9)
    toy = ToyDenoiser(schedule)
    mu = rng.random((5, 5, 3))
    cond = cond_from_semantic(mu)
    x0 = mu + rng.normal(size=mu.shape)
    t = 0.3
    resids = []
    for _ in range(3):
        eps = rng.normal(size=mu.shape)
        x_t = perturb(schedule, x0, t, eps)
        resids.append(toy.predict(x_t, t, "", cond) - eps)
    assert np.allclose(resids[0], resids[1], atol=1e-12)
    assert np.allclose(resids[0], resids[2], atol=1e-12)


def test_time_embedding_shape():
    e = time_embedding(0.3)
    assert e.shape == (8,)
    assert np.all(np.abs(e) <= 1.0)


def test_particle_bias_only_convergence(schedule):
    rng = np.random.default_rng(11)
    model = AffineParticleDenoiser(ParticleConfig(lr=0.5))
    cond = cond_from_semantic(rng.random((8, 8, 3)))
    x_t = rng.normal(size=(8, 8, 3))
    target = np.full((8, 8, 3), 0.7)
    t = 0.5
    for _ in range(200):
        model.train_step(x_t, t, cond, target)
    pred = model.predict(x_t, t, cond)
    assert float(np.max(np.abs(pred - target))) < 1e-3


def test_particle_fixed_point(schedule):
    rng = np.random.default_rng(12)
    model = AffineParticleDenoiser()
    model.weights = rng.normal(size=model.weights.shape) * 0.1
    cond = cond_from_semantic(rng.random((4, 4, 3)))
    x_t = rng.normal(size=(4, 4, 3))
    pred = model.predict(x_t, 0.4, cond)
    before = model.weights.copy()
    model.train_step(x_t, 0.4, cond, pred)
    assert np.array_equal(model.weights, before)


def test_particle_weight_gradient_finite_difference(schedule):
    rng = np.random.default_rng(13)
    cfg = ParticleConfig(lr=1.0)  # lr 1 makes the update equal minus the gradient
    cond = cond_from_semantic(rng.random((4, 4, 3)))
    x_t = rng.normal(size=(4, 4, 3))
    target = rng.normal(size=(4, 4, 3))
    t = 0.7
    w0 = rng.normal(size=(3, cfg.feature_dim)) * 0.2

    def loss_at(w):
        m = AffineParticleDenoiser(cfg)
        m.weights = w.copy()
        pred = m.predict(x_t, t, cond)
        return float(np.mean((pred - target) ** 2))

    model = AffineParticleDenoiser(cfg)
    model.weights = w0.copy()
    model.train_step(x_t, t, cond, target)
    grad = w0 - model.weights  # lr = 1

    eps = 1e-6
    rngi = np.random.default_rng(14)
    for _ in range(20):
        c = int(rngi.integers(0, 3))
        k = int(rngi.integers(0, cfg.feature_dim))
        wp = w0.copy()
        wp[c, k] += eps
        wm = w0.copy()
        wm[c, k] -= eps
        fd = (loss_at(wp) - loss_at(wm)) / (2 * eps)
        assert fd == pytest.approx(grad[c, k], rel=1e-4, abs=1e-9)


def test_particle_loss_nonincreasing(schedule):
    rng = np.random.default_rng(15)
    model = AffineParticleDenoiser(ParticleConfig(lr=0.02))
    cond = cond_from_semantic(rng.random((8, 8, 3)))
    x_t = rng.normal(size=(8, 8, 3))
    target = rng.normal(size=(8, 8, 3))
    losses = [model.train_step(x_t, 0.5, cond, target) for _ in range(100)]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_true_eps_oracle():
    oracle = TrueEpsOracle()
    eps = np.ones((2, 2, 3))
    assert np.array_equal(oracle.predict(None, 0.5, None, true_eps=eps), eps)
    with pytest.raises(ValueError):
        oracle.predict(None, 0.5, None)


def test_blur_target_constant_map_is_fixed_point(schedule):
    blur = BlurTargetDenoiser(schedule)
    x = np.full((12, 12), 0.4)
    assert np.allclose(blur.target(x), x, atol=1e-12)
    eps = np.random.default_rng(1).normal(size=x.shape)
    t = 0.5
    x_t = perturb(schedule, x, t, eps)
    assert np.allclose(blur.predict(x_t, t, x) - eps, 0.0, atol=1e-10)


def test_blur_target_spike_residual(schedule):
    blur = BlurTargetDenoiser(schedule)
    x = np.full((11, 11), 0.2)
    x[5, 5] += 0.5
    target = blur.target(x)
    assert target[5, 5] < x[5, 5]  # blur pulls the spike down
    t = 0.5
    abar = schedule.alpha_bar_at(t)
    eps = np.zeros_like(x)
    x_t = perturb(schedule, x, t, eps)
    resid = blur.predict(x_t, t, x) - eps
    expect = np.sqrt(abar / (1 - abar)) * (x - target)
    assert np.allclose(resid, expect, atol=1e-10)
    assert resid[5, 5] > 0


# ---------------------------------------------------------------------------
# wire protocol

_LEN = struct.Struct("<I")


def _read_exact(sock, n):
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("eof")
        buf += chunk
    return buf


def echo_server(mode="echo"):
    """Minimal protocol server for loopback tests: answers eps_hat = x_t."""
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)
    port = srv.getsockname()[1]

    def run():
        conn, _ = srv.accept()
        with conn:
            magic = _read_exact(conn, 4)
            assert magic == b"DNRQ"
            (hlen,) = _LEN.unpack(_read_exact(conn, 4))
            header = json.loads(_read_exact(conn, hlen).decode())
            c, h, w = header["shape"]
            x = _read_exact(conn, c * h * w * 4)
            cc, ch, cw = header["cond_shape"]
            _read_exact(conn, cc * ch * cw * 4)
            resp_header = json.dumps({"shape": [c, h, w]}).encode()
            if mode == "echo":
                conn.sendall(b"DNRS" + _LEN.pack(len(resp_header)) + resp_header + x)
            elif mode == "truncate":
                conn.sendall(b"DNRS" + _LEN.pack(len(resp_header)) + resp_header + x[: len(x) // 2])
            elif mode == "badshape":
                bad = json.dumps({"shape": [c, h, w + 1]}).encode()
                conn.sendall(b"DNRS" + _LEN.pack(len(bad)) + bad + x + b"\x00" * (c * h * 4))
            elif mode == "error":
                msg = json.dumps({"message": "boom"}).encode()
                conn.sendall(b"DNER" + _LEN.pack(len(msg)) + msg)
        srv.close()

    t = threading.Thread(target=run, daemon=True)
    t.start()
    return port, t


def test_loopback_bit_exact():
    port, thread = echo_server("echo")
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6, 5)).astype(np.float32)
    cond = rng.normal(size=(13, 6, 5)).astype(np.float32)
    conn = TcpDenoiserConnection(f"127.0.0.1:{port}", timeout=10.0)
    resp = remote_denoise(conn, DenoiserRequest(x_t=x, t=0.5, cond=cond, camera_tag="cam0"))
    conn.close()
    thread.join(timeout=5)
    assert resp.eps_hat.dtype == np.float32
    assert np.array_equal(resp.eps_hat, x)  # every float bit-exact


def test_truncated_response_is_protocol_error():
    port, thread = echo_server("truncate")
    x = np.zeros((2, 4, 4), dtype=np.float32)
    conn = TcpDenoiserConnection(f"127.0.0.1:{port}", timeout=10.0)
    with pytest.raises(ProtocolError):
        remote_denoise(conn, DenoiserRequest(x_t=x, t=0.5))
    conn.close()
    thread.join(timeout=5)


def test_mismatched_shape_is_shape_mismatch():
    port, thread = echo_server("badshape")
    x = np.zeros((2, 4, 4), dtype=np.float32)
    conn = TcpDenoiserConnection(f"127.0.0.1:{port}", timeout=10.0)
    with pytest.raises(ShapeMismatch):
        remote_denoise(conn, DenoiserRequest(x_t=x, t=0.5))
    conn.close()
    thread.join(timeout=5)


def test_error_frame_is_protocol_error():
    port, thread = echo_server("error")
    x = np.zeros((1, 2, 2), dtype=np.float32)
    conn = TcpDenoiserConnection(f"127.0.0.1:{port}", timeout=10.0)
    with pytest.raises(ProtocolError, match="boom"):
        remote_denoise(conn, DenoiserRequest(x_t=x, t=0.5))
    conn.close()
    thread.join(timeout=5)


def test_request_encoding_layout():
    x = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    cond = np.zeros((13, 2, 2), dtype=np.float32)
    raw = encode_request(DenoiserRequest(x_t=x, t=0.25, prompt="p", cond=cond, camera_tag="c"))
    assert raw[:4] == b"DNRQ"
    (hlen,) = _LEN.unpack(raw[4:8])
    header = json.loads(raw[8:8 + hlen].decode())
    assert header["shape"] == [2, 2, 2]
    assert header["cond_shape"] == [13, 2, 2]
    payload = np.frombuffer(raw[8 + hlen:8 + hlen + 32], dtype="<f4")
    assert np.array_equal(payload.reshape(2, 2, 2), x)
