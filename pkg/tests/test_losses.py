import numpy as np
import pytest

from evsforge.condition import ConditionMaps, pack_control
from evsforge.diffusion import (
    AffineParticleDenoiser,
    BlurTargetDenoiser,
    DiffusionSchedule,
    ToyDenoiser,
    TrueEpsOracle,
)
from evsforge.gsplat import RenderOutputs
from evsforge.losses import (
    DistillGrads,
    LossWeights,
    TelemetryRecord,
    g_sds_grad,
    hsg_sds_grad,
    hsg_vsd_grad,
    recon_loss,
    ssim,
    total_step_loss,
)


@pytest.fixture(scope="module")
def schedule():
    return DiffusionSchedule()


def make_render(color, depth=None, normal=None, alpha=None):
    h, w, _ = color.shape
    return RenderOutputs(
        color=color,
        depth=np.zeros((h, w, 1)) if depth is None else depth,
        normal=np.zeros((h, w, 3)) if normal is None else normal,
        alpha=np.ones((h, w, 1)) if alpha is None else alpha,
    )


def cond_from_semantic(s):
    h, w, _ = s.shape
    return ConditionMaps(S=s, D=np.zeros((h, w, 1)), R=np.zeros((h, w, 9)),
                         C=pack_control(s, np.zeros((h, w, 1)), np.zeros((h, w, 9))))


# ---------------------------------------------------------------------------
# reconstruction

def test_recon_identity_zero():
    rng = np.random.default_rng(0)
    img = rng.random((8, 8, 3))
    n = rng.normal(size=(8, 8, 3))
    n /= np.linalg.norm(n, axis=2, keepdims=True)
    render = make_render(img.copy(), normal=n.copy())
    out = recon_loss(render, img, gt_normal=n)
    assert out.total == pytest.approx(0.0, abs=1e-12)
    # SSIM is maximal at x == y; the analytic gradient cancels to fp noise
    assert np.max(np.abs(out.grad_color)) < 1e-12
    assert np.all(out.grad_normal == 0)


def test_l1_constant_offset_exact():
    gt = np.full((8, 8, 3), 0.4)
    render = make_render(gt + 0.1)
    out = recon_loss(render, gt)
    assert out.l1 == pytest.approx(0.1, abs=1e-15)


def test_ssim_self_is_one():
    rng = np.random.default_rng(1)
    x = rng.random((16, 16, 3))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)


def test_ssim_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.random((8, 8, 1))
    y = rng.random((8, 8, 1))
    _, grad = ssim(x, y, with_grad=True)
    eps = 1e-6
    rr = np.random.default_rng(3)
    for _ in range(25):
        i, j = rr.integers(0, 8, size=2)
        xp = x.copy()
        xp[i, j, 0] += eps
        xm = x.copy()
        xm[i, j, 0] -= eps
        fd = (ssim(xp, y) - ssim(xm, y)) / (2 * eps)
        assert fd == pytest.approx(grad[i, j, 0], rel=1e-3, abs=1e-10)


def test_recon_decomposition_matches_hand_computation():
    rng = np.random.default_rng(4)
    img = rng.random((10, 10, 3))
    gt = rng.random((10, 10, 3))
    gtn = rng.normal(size=(10, 10, 3))
    gtn /= np.linalg.norm(gtn, axis=2, keepdims=True)
    nr = rng.normal(size=(10, 10, 3))
    nr /= np.linalg.norm(nr, axis=2, keepdims=True)
    alpha = rng.random((10, 10, 1))
    render = make_render(img, normal=nr, alpha=alpha)
    lam_r = 0.2
    out = recon_loss(render, gt, gt_normal=gtn, lambda_r=lam_r)

    l1 = np.mean(np.abs(img - gt))
    dssim = (1 - ssim(img, gt)) / 2
    mask = alpha[:, :, 0] > 0.5
    lnormal = np.sum(((nr - gtn) * mask[:, :, None]) ** 2) / mask.sum()
    assert out.total == pytest.approx((1 - lam_r) * l1 + lam_r * dssim + lnormal, abs=1e-9)
    assert out.l1 == pytest.approx(l1, abs=1e-12)
    assert out.dssim == pytest.approx(dssim, abs=1e-12)
    assert out.lnormal == pytest.approx(lnormal, abs=1e-12)


def test_recon_normal_absent_contributes_zero():
    rng = np.random.default_rng(5)
    img = rng.random((6, 6, 3))
    out = recon_loss(make_render(img), img + 0.05)
    assert out.lnormal == 0.0
    assert np.all(out.grad_normal == 0)


# ---------------------------------------------------------------------------
# distillation

def test_vsd_matched_pair_zero_gradient(schedule):
    """With the particle identical to the scene model the gradient vanishes."""

    class ToyAsParticle:
        def __init__(self, toy):
            self.toy = toy

        def predict(self, x_t, t, cond, camera_tag=None, true_eps=None):
            return self.toy.predict(x_t, t, "", cond)

        def train_step(self, *a, **k):
            return 0.0

    rng = np.random.default_rng(6)
    mu = rng.random((8, 8, 3))
    cond = cond_from_semantic(mu)
    render = make_render(rng.random((8, 8, 3)))
    toy = ToyDenoiser(schedule)
    grad = hsg_vsd_grad(render, cond, "cam", schedule, toy, ToyAsParticle(toy),
                        np.random.default_rng(7))
    assert np.all(grad == 0)


def test_vsd_reduces_to_sds_bit_for_bit(schedule):
    rng_a = np.random.default_rng(42)
    rng_b = np.random.default_rng(42)
    mu = np.random.default_rng(8).random((8, 8, 3))
    cond = cond_from_semantic(mu)
    render = make_render(np.random.default_rng(9).random((8, 8, 3)))
    toy = ToyDenoiser(schedule)
    g_vsd = hsg_vsd_grad(render, cond, "cam", schedule, toy, TrueEpsOracle(), rng_a)
    g_sds = hsg_sds_grad(render, cond, schedule, toy, rng_b)
    assert np.array_equal(g_vsd, g_sds)


def _cosine(a, b):
    return float(np.sum(a * b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_vsd_toy_direction_with_noise_cancelling_particle(schedule):
    # in the regime where the particle predicts the injected noise, every
    # single draw points from the render toward the condition target
    rng = np.random.default_rng(10)
    mu = rng.random((8, 8, 3))
    cond = cond_from_semantic(mu)
    render = make_render(np.clip(mu + rng.normal(scale=0.3, size=mu.shape), 0, 1))
    toy = ToyDenoiser(schedule)
    direction = render.color - mu
    for _ in range(64):
        g = hsg_vsd_grad(render, cond, "cam", schedule, toy, TrueEpsOracle(), rng)
        assert _cosine(g, direction) > 0.999999


def test_vsd_toy_direction_fresh_particle_in_expectation(schedule):
    # a fresh (zero-prediction) particle leaves the injected-noise term in the
    # gradient; its Monte-Carlo average still points along render - mu, but
    # needs far more than 64 draws to beat the noise floor (lr 0 keeps the
    # particle fresh across draws)
    from evsforge.diffusion import ParticleConfig

    rng = np.random.default_rng(10)
    mu = rng.random((8, 8, 3))
    cond = cond_from_semantic(mu)
    render = make_render(np.clip(mu + rng.normal(scale=0.3, size=mu.shape), 0, 1))
    toy = ToyDenoiser(schedule)
    particle = AffineParticleDenoiser(ParticleConfig(lr=0.0))
    acc = np.zeros_like(render.color)
    for _ in range(8192):
        acc += hsg_vsd_grad(render, cond, "cam", schedule, toy, particle, rng)
    assert _cosine(acc, render.color - mu) > 0.95


def test_sds_converged_zero(schedule):
    rng = np.random.default_rng(11)
    mu = rng.random((8, 8, 3))
    cond = cond_from_semantic(mu)
    grad = hsg_sds_grad(make_render(mu.copy()), cond, schedule, ToyDenoiser(schedule),
                        np.random.default_rng(12))
    assert np.max(np.abs(grad)) < 1e-12


def test_sds_closed_form_offset(schedule):
    rng = np.random.default_rng(13)
    mu = rng.random((8, 8, 3))
    delta = rng.normal(scale=0.2, size=mu.shape)
    cond = cond_from_semantic(mu)
    draw = np.random.default_rng(14)
    t_probe = np.random.default_rng(14).uniform(schedule.t_min, schedule.t_max)
    grad = hsg_sds_grad(make_render(mu + delta), cond, schedule, ToyDenoiser(schedule), draw)
    abar = schedule.alpha_bar_at(t_probe)
    expect = schedule.omega(t_probe) * np.sqrt(abar / (1 - abar)) * delta
    assert np.allclose(grad, expect, atol=1e-10)


def test_sds_linearity_of_direction(schedule):
    rng = np.random.default_rng(15)
    mu = rng.random((6, 6, 3))
    delta = rng.normal(scale=0.1, size=mu.shape)
    for scale in (1.0, 3.0):
        cond = cond_from_semantic(scale * mu)
        g = hsg_sds_grad(make_render(scale * (mu + delta)), cond, schedule,
                         ToyDenoiser(schedule), np.random.default_rng(16))
        gn = g / np.linalg.norm(g)
        dn = delta / np.linalg.norm(delta)
        assert np.allclose(gn, dn, atol=1e-9)


def test_sds_norm_shrinks_along_line(schedule):
    rng = np.random.default_rng(17)
    mu = rng.random((8, 8, 3))
    delta = rng.normal(scale=0.4, size=mu.shape)
    cond = cond_from_semantic(mu)
    toy = ToyDenoiser(schedule)
    norms = []
    for k in range(5):
        x0 = mu + delta * (1.0 - k / 4.0)
        draws = np.random.default_rng(100)
        g = [hsg_sds_grad(make_render(x0), cond, schedule, toy, draws) for _ in range(256)]
        norms.append(float(np.mean([np.linalg.norm(x) for x in g])))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_gsds_constant_depth_zero(schedule):
    render = make_render(np.zeros((8, 8, 3)), depth=np.full((8, 8, 1), 3.0))
    gd, _ = g_sds_grad(render, far_clip=10.0, schedule=schedule,
                       geo_denoiser=BlurTargetDenoiser(schedule),
                       rng=np.random.default_rng(18))
    assert np.max(np.abs(gd)) < 1e-10


def test_gsds_spike_positive_gradient(schedule):
    depth = np.full((9, 9, 1), 4.0)
    depth[4, 4, 0] += 5.0  # nearer spike is a smaller value... push it with +
    render = make_render(np.zeros((9, 9, 3)), depth=depth)
    far = 10.0
    gd, _ = g_sds_grad(render, far_clip=far, schedule=schedule,
                       geo_denoiser=BlurTargetDenoiser(schedule),
                       rng=np.random.default_rng(19))
    # closed form: omega * sqrt(abar/(1-abar)) * (d - blur(d)) / far
    assert gd[4, 4] > 0


def test_gsds_constant_normal_zero(schedule):
    normal = np.zeros((8, 8, 3))
    normal[:, :, 2] = 1.0
    render = make_render(np.zeros((8, 8, 3)), normal=normal)
    _, gn = g_sds_grad(render, far_clip=10.0, schedule=schedule,
                       geo_denoiser=BlurTargetDenoiser(schedule),
                       rng=np.random.default_rng(20))
    assert np.max(np.abs(gn)) < 1e-10


def test_gsds_closed_form(schedule):
    rng = np.random.default_rng(21)
    depth = np.abs(rng.normal(size=(8, 8, 1))) + 1.0
    render = make_render(np.zeros((8, 8, 3)), depth=depth)
    far = 12.0
    blur = BlurTargetDenoiser(schedule)
    probe = np.random.default_rng(22)
    t_d = np.random.default_rng(22).uniform(schedule.t_min, schedule.t_max)
    gd, _ = g_sds_grad(render, far_clip=far, schedule=schedule, geo_denoiser=blur,
                       rng=probe)
    dn = depth[:, :, 0] / far
    abar = schedule.alpha_bar_at(t_d)
    expect = schedule.omega(t_d) * np.sqrt(abar / (1 - abar)) * (dn - blur.target(dn)) / far
    assert np.allclose(gd, expect, atol=1e-10)


# ---------------------------------------------------------------------------
# combination

def test_total_lambda2_zero(schedule):
    rng = np.random.default_rng(23)
    img = rng.random((8, 8, 3))
    render = make_render(img)
    recon = recon_loss(render, img + 0.1)
    distill = DistillGrads(color=rng.normal(size=(8, 8, 3)))
    weights = LossWeights(lambda1=1e4, lambda2=0.0)
    out = total_step_loss(weights, recon, distill, (8, 8, 3))
    assert np.allclose(out.color, 1e4 * recon.grad_color, atol=0)
    assert np.all(out.depth == 0)


def test_total_lambda1_zero_converged(schedule):
    rng = np.random.default_rng(24)
    mu = rng.random((8, 8, 3))
    cond = cond_from_semantic(mu)
    g = hsg_sds_grad(make_render(mu.copy()), cond, schedule, ToyDenoiser(schedule),
                     np.random.default_rng(25))
    out = total_step_loss(LossWeights(lambda1=0.0), None, DistillGrads(color=g), (8, 8, 3))
    assert np.max(np.abs(out.color)) < 1e-12


def test_default_weights_recon_dominates(schedule):
    rng = np.random.default_rng(26)
    gt = rng.random((16, 16, 3))
    render = make_render(np.clip(gt + rng.normal(scale=0.02, size=gt.shape), 0, 1),
                         depth=rng.random((16, 16, 1)) * 5)
    mu = rng.random((16, 16, 3))
    cond = cond_from_semantic(mu)
    weights = LossWeights()
    assert (weights.lambda1, weights.lambda2, weights.lambda_r) == (1e4, 1.0, 0.2)

    recon = recon_loss(render, gt, lambda_r=weights.lambda_r)
    vsd = hsg_sds_grad(render, cond, schedule, ToyDenoiser(schedule),
                       np.random.default_rng(27))
    gd, gn = g_sds_grad(render, 10.0, schedule, BlurTargetDenoiser(schedule),
                        np.random.default_rng(28))
    recon_mag = np.linalg.norm(weights.lambda1 * recon.grad_color)
    distill_mag = np.linalg.norm(weights.lambda2 * vsd) + np.linalg.norm(
        weights.lambda2 * gd) + np.linalg.norm(weights.lambda2 * gn)
    assert recon_mag >= 10 * distill_mag


def test_telemetry_json_round_trip():
    import json
    rec = TelemetryRecord(step=3, stage=2, l1=0.5, vsd_grad_norm=1.25)
    obj = json.loads(rec.to_json())
    assert obj["step"] == 3 and obj["stage"] == 2
    assert obj["l1"] == 0.5 and obj["vsd_grad_norm"] == 1.25
