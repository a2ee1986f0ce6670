"""Loss terms and assembled gradients.

Reconstruction combines (1 - lr) L1 + lr D-SSIM on color with a squared-L2
normal term over confidently-covered pixels. Distillation terms are injected
directly as pixel gradients (the update is defined as a gradient, not as a
differentiable scalar): the variational form subtracts the particle model's
prediction, the plain form subtracts the injected noise, and the geometry
form regularizes the rendered depth/normal maps.

Every distillation call owns its RNG stream and draws (t, eps) in a fixed
order, so replacing the particle model with the true-noise oracle reproduces
the plain form bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .condition import ConditionMaps
from .diffusion import DEFAULT_PROMPT, DiffusionSchedule, perturb
from .errors import ShapeMismatch
from .gsplat import RenderOutputs

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
NORMAL_ALPHA_GATE = 0.5


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1e4   # reconstruction weight
    lambda2: float = 1.0   # distillation weight
    lambda_r: float = 0.2  # D-SSIM share inside the reconstruction term

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or not (0 <= self.lambda_r <= 1):
            raise ValueError("weights must be nonnegative with lambda_r in [0,1]")


def _gauss_taps(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


_SSIM_TAPS = _gauss_taps()


def _blur(img):
    """Separable Gaussian filtering with zero padding (a symmetric operator,
    which the gradient derivation relies on)."""
    out = correlate1d(img, _SSIM_TAPS, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _SSIM_TAPS, axis=1, mode="constant", cval=0.0)


def ssim(x, y, with_grad=False):
    """Mean SSIM over pixels and channels, dynamic range 1.

    With with_grad=True also returns d(mean SSIM)/dx, treating y as constant.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"ssim inputs {x.shape} vs {y.shape}")
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2

    mx = _blur(x)
    my = _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my

    a1 = 2 * mx * my + c1
    a2 = 2 * sxy + c2
    b1 = mx * mx + my * my + c1
    b2 = sxx + syy + c2
    u = a1 / b1
    v = a2 / b2
    ssim_map = u * v
    value = float(ssim_map.mean())
    if not with_grad:
        return value

    # partials of the per-pixel map w.r.t. (mx, sxx, sxy), each times 1/n;
    # grouped so that at x == y every term cancels exactly in float arithmetic
    # (otherwise rounding noise, amplified by large loss weights, masquerades
    # as real gradient at convergence)
    n = ssim_map.size
    q = u / b2 / n
    d_mx = 2.0 * v * (my - u * mx) / b1 / n
    d_sxx = -(q * v)
    d_sxy = 2.0 * q

    # pull back through the (symmetric) blur operator
    grad = _blur(d_mx - 2 * mx * d_sxx - my * d_sxy)
    grad += 2 * x * _blur(d_sxx)
    grad += y * _blur(d_sxy)
    return value, grad


@dataclass
class ReconResult:
    total: float
    l1: float
    dssim: float
    lnormal: float
    grad_color: np.ndarray
    grad_normal: np.ndarray


def recon_loss(render: RenderOutputs, gt_image, gt_normal=None,
               lambda_r: float = 0.2) -> ReconResult:
    """(1 - lr) L1 + lr D-SSIM + normal term, with gradients on the rendered
    color and normal maps."""
    color = render.color
    gt = np.asarray(gt_image, dtype=np.float64)
    if color.shape != gt.shape:
        raise ShapeMismatch(f"render {color.shape} vs gt {gt.shape}")

    diff = color - gt
    l1 = float(np.mean(np.abs(diff)))
    g_l1 = np.sign(diff) / diff.size

    ssim_val, g_ssim = ssim(color, gt, with_grad=True)
    dssim = (1.0 - ssim_val) / 2.0
    g_dssim = -0.5 * g_ssim

    grad_normal = np.zeros_like(render.normal)
    lnormal = 0.0
    if gt_normal is not None:
        gtn = np.asarray(gt_normal, dtype=np.float64)
        if gtn.shape != render.normal.shape:
            raise ShapeMismatch(f"normal {render.normal.shape} vs gt {gtn.shape}")
        mask = render.alpha[:, :, 0] > NORMAL_ALPHA_GATE
        count = int(mask.sum())
        if count:
            delta = (render.normal - gtn) * mask[:, :, None]
            lnormal = float(np.sum(delta ** 2) / count)
            grad_normal = 2.0 * delta / count

    total = (1.0 - lambda_r) * l1 + lambda_r * dssim + lnormal
    grad_color = (1.0 - lambda_r) * g_l1 + lambda_r * g_dssim
    return ReconResult(total=total, l1=l1, dssim=dssim, lnormal=lnormal,
                       grad_color=grad_color, grad_normal=grad_normal)


# ---------------------------------------------------------------------------
# distillation gradients

def hsg_vsd_grad(render: RenderOutputs, cond: ConditionMaps, pose_tag: str,
                 schedule: DiffusionSchedule, eps_p, eps_phi, rng,
                 prompt: str = DEFAULT_PROMPT):
    """Variational distillation pixel gradient on the rendered color.

    Draws (t, eps), perturbs the render, subtracts the particle prediction
    from the scene model's, weights by omega(t), then advances the particle
    model one step toward the injected noise.
    """
    t = schedule.sample_t(rng)
    eps = rng.standard_normal(render.color.shape)
    x_t = perturb(schedule, render.color, t, eps)
    e_p = eps_p.predict(x_t, t, prompt, cond)
    e_phi = eps_phi.predict(x_t, t, cond, camera_tag=pose_tag, true_eps=eps)
    grad = schedule.omega(t) * (e_p - e_phi)
    eps_phi.train_step(x_t, t, cond, eps_target=eps, camera_tag=pose_tag)
    return grad


def hsg_sds_grad(render: RenderOutputs, cond: ConditionMaps,
                 schedule: DiffusionSchedule, eps_p, rng,
                 prompt: str = DEFAULT_PROMPT):
    """Plain distillation gradient: subtracts the injected noise instead of a
    particle prediction; identical plumbing otherwise."""
    t = schedule.sample_t(rng)
    eps = rng.standard_normal(render.color.shape)
    x_t = perturb(schedule, render.color, t, eps)
    e_p = eps_p.predict(x_t, t, prompt, cond)
    return schedule.omega(t) * (e_p - eps)


def g_sds_grad(render: RenderOutputs, far_clip: float,
               schedule: DiffusionSchedule, geo_denoiser, rng):
    """Geometry distillation on the depth and normal maps, independently.

    Depth is normalized by the far clip and normals remapped to [0,1] before
    the noise round trip; returned gradients are chained back to the raw maps
    (meters / unit vectors) for the rasterizer backward. The depth branch
    draws first.
    """
    depth_n = render.depth[:, :, 0] / far_clip
    t_d = schedule.sample_t(rng)
    eps_d = rng.standard_normal(depth_n.shape)
    x_td = perturb(schedule, depth_n, t_d, eps_d)
    g_depth_n = schedule.omega(t_d) * (geo_denoiser.predict(x_td, t_d, depth_n) - eps_d)

    normal01 = (render.normal + 1.0) / 2.0
    t_n = schedule.sample_t(rng)
    eps_n = rng.standard_normal(normal01.shape)
    x_tn = perturb(schedule, normal01, t_n, eps_n)
    g_normal01 = schedule.omega(t_n) * (geo_denoiser.predict(x_tn, t_n, normal01) - eps_n)

    return g_depth_n / far_clip, g_normal01 / 2.0


@dataclass
class DistillGrads:
    color: np.ndarray | None = None
    depth: np.ndarray | None = None
    normal: np.ndarray | None = None

    def color_norm(self) -> float:
        return float(np.linalg.norm(self.color)) if self.color is not None else 0.0

    def geo_norm(self) -> float:
        n = 0.0
        if self.depth is not None:
            n += float(np.sum(self.depth ** 2))
        if self.normal is not None:
            n += float(np.sum(self.normal ** 2))
        return float(np.sqrt(n))


@dataclass
class StepGrads:
    scalar: float
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray


def total_step_loss(weights: LossWeights, recon: ReconResult | None,
                    distill: DistillGrads | None, shape_hw3) -> StepGrads:
    """Weighted combination of both branches (either may be absent).

    The scalar is the weighted reconstruction value plus the distillation
    gradient norm; the distillation branch itself contributes gradients only.
    """
    h, w, _ = shape_hw3
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    normal = np.zeros((h, w, 3))
    scalar = 0.0
    if recon is not None:
        color += weights.lambda1 * recon.grad_color
        normal += weights.lambda1 * recon.grad_normal
        scalar += weights.lambda1 * recon.total
    if distill is not None:
        if distill.color is not None:
            color += weights.lambda2 * distill.color
        if distill.depth is not None:
            depth += weights.lambda2 * distill.depth
        if distill.normal is not None:
            normal += weights.lambda2 * distill.normal
        scalar += weights.lambda2 * (distill.color_norm() + distill.geo_norm())
    return StepGrads(scalar=scalar, color=color, depth=depth, normal=normal)


# ---------------------------------------------------------------------------
# telemetry

@dataclass
class TelemetryRecord:
    step: int
    stage: int
    l1: float = 0.0
    dssim: float = 0.0
    lnormal: float = 0.0
    vsd_grad_norm: float = 0.0
    gsds_grad_norm: float = 0.0

    def to_json(self) -> str:
        return json.dumps({
            "step": self.step, "stage": self.stage, "l1": self.l1,
            "dssim": self.dssim, "lnormal": self.lnormal,
            "vsd_grad_norm": self.vsd_grad_norm,
            "gsds_grad_norm": self.gsds_grad_norm,
        })
