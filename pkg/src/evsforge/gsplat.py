"""Differentiable Gaussian-splat scene representation.

Parameters are struct-of-arrays; the scene decomposes into a static set plus
per-instance dynamic sets stored in box coordinates. Rasterization is
tile-free with a full per-pixel depth sort (correctness over throughput at
desk scale), and the backward pass assembles analytic gradients for every
parameter group through the front-to-back compositing chain.

Color is a constant RGB per Gaussian; per-splat normals are the shortest
activated-scale axis, sign-flipped to face the camera.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, CameraPose
from .condition import BoundingBox3D
from .errors import MissingFramePose
from .fmap import load_fmap, save_fmap

NEAR_CLIP = 0.01
COV2D_REG = 0.3          # px^2 added to the projected covariance diagonal
TRANSMITTANCE_FLOOR = 1e-4
CULL_SIGMA = 3.0
PRUNE_OPACITY = 0.005
RESET_OPACITY = 0.01


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rot(q):
    """(..., 4) unit quaternions -> (..., 3, 3) rotation matrices."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rot_to_quat(r):
    """3x3 rotation -> unit quaternion (w, x, y, z), w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    t = np.trace(r)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(r[i, i] - r[j, j] - r[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_multiply(a, b):
    """Hamilton product a (x) b; both (..., 4)."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_left_matrix(q):
    """4x4 matrix L with quat_multiply(q, p) == L @ p."""
    w, x, y, z = q
    return np.array([
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])


def _drot_dquat(q):
    """(..., 4, 3, 3) partials of quat_to_rot w.r.t. each unit-quat component."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zeros = np.zeros_like(w)
    dw = np.stack([zeros, -z, y, z, zeros, -x, -y, x, zeros], axis=-1)
    dx = np.stack([zeros, y, z, y, -2 * x, -w, z, w, -2 * x], axis=-1)
    dy = np.stack([-2 * y, x, w, x, zeros, z, -w, z, -2 * y], axis=-1)
    dz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zeros], axis=-1)
    out = 2.0 * np.stack([dw, dx, dy, dz], axis=-2)
    return out.reshape(q.shape[:-1] + (4, 3, 3))


# ---------------------------------------------------------------------------
# parameter containers

PARAM_GROUPS = ("means", "log_scales", "quats", "opacity_logits", "colors")


@dataclass
class GaussianParams:
    """Struct-of-arrays parameter block for one Gaussian set."""

    means: np.ndarray           # (N, 3) world or box-frame meters
    log_scales: np.ndarray      # (N, 3) log meters
    quats: np.ndarray           # (N, 4) unit (w, x, y, z)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray          # (N, 3) in [0, 1]

    def __post_init__(self):
        n = self.means.shape[0]
        assert self.means.shape == (n, 3)
        assert self.log_scales.shape == (n, 3)
        assert self.quats.shape == (n, 4)
        assert self.opacity_logits.shape == (n,)
        assert self.colors.shape == (n, 3)

    def __len__(self):
        return self.means.shape[0]

    @staticmethod
    def empty() -> "GaussianParams":
        return GaussianParams(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                              np.zeros(0), np.zeros((0, 3)))

    @staticmethod
    def concat(blocks) -> "GaussianParams":
        return GaussianParams(*(np.concatenate([getattr(b, g) for b in blocks])
                                for g in PARAM_GROUPS))

    def select(self, idx) -> "GaussianParams":
        return GaussianParams(*(getattr(self, g)[idx] for g in PARAM_GROUPS))

    def copy(self) -> "GaussianParams":
        return GaussianParams(*(getattr(self, g).copy() for g in PARAM_GROUPS))

    def has_nan(self) -> bool:
        return any(np.isnan(getattr(self, g)).any() for g in PARAM_GROUPS)


@dataclass
class ParamGrads:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    # densification bookkeeping: screen-space positional gradient and whether
    # the splat entered the frustum this render
    mu2d: np.ndarray = None
    visible: np.ndarray = None

    def __post_init__(self):
        n = self.means.shape[0]
        if self.mu2d is None:
            self.mu2d = np.zeros((n, 2))
        if self.visible is None:
            self.visible = np.zeros(n, dtype=bool)

    @staticmethod
    def zeros(n) -> "ParamGrads":
        return ParamGrads(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)),
                          np.zeros(n), np.zeros((n, 3)))

    def slice(self, start, end) -> "ParamGrads":
        out = ParamGrads(*(getattr(self, g)[start:end] for g in PARAM_GROUPS))
        out.mu2d = self.mu2d[start:end]
        out.visible = self.visible[start:end]
        return out


@dataclass
class GaussianCloud:
    """Static set plus instance sets expressed in their boxes' frames."""

    static: GaussianParams
    instances: dict = field(default_factory=dict)  # id -> (GaussianParams, BoundingBox3D)

    def total_count(self) -> int:
        return len(self.static) + sum(len(p) for p, _ in self.instances.values())

    def has_nan(self) -> bool:
        return self.static.has_nan() or any(p.has_nan() for p, _ in self.instances.values())

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            static=self.static.copy(),
            instances={iid: (p.copy(), box) for iid, (p, box) in self.instances.items()},
        )


@dataclass
class RenderOutputs:
    color: np.ndarray   # (H, W, 3)
    depth: np.ndarray   # (H, W, 1) alpha-weighted expected depth, meters
    normal: np.ndarray  # (H, W, 3) unit where alpha > 0.5
    alpha: np.ndarray   # (H, W, 1) accumulated opacity


def compose_scene(cloud: GaussianCloud, frame=None):
    """Flatten the cloud into world-frame parameters.

    Returns (params, segments); each segment is (key, start, end, box_pose)
    with key "static" or ("instance", id) and box_pose = (center, rotation,
    rotation_quat) for instance segments (None for static). Segments let the
    trainer pull composed-frame gradients back to the stored parameters.
    """
    blocks = [cloud.static]
    segments = [("static", 0, len(cloud.static), None)]
    offset = len(cloud.static)
    for iid in sorted(cloud.instances):
        params, box = cloud.instances[iid]
        c, r = box.pose_at(frame)
        qb = rot_to_quat(r)
        world = GaussianParams(
            means=params.means @ r.T + c,
            log_scales=params.log_scales.copy(),
            quats=quat_multiply(qb, params.quats),
            opacity_logits=params.opacity_logits.copy(),
            colors=params.colors.copy(),
        )
        blocks.append(world)
        segments.append((("instance", iid), offset, offset + len(params), (c, r, qb)))
        offset += len(params)
    return GaussianParams.concat(blocks), segments


def pull_back_grads(grads: ParamGrads, segments) -> dict:
    """Map world-frame gradients onto the stored static/instance parameters."""
    out = {}
    for key, start, end, pose in segments:
        g = grads.slice(start, end)
        if pose is None:
            pulled = ParamGrads(g.means.copy(), g.log_scales.copy(), g.quats.copy(),
                                g.opacity_logits.copy(), g.colors.copy())
        else:
            _, r, qb = pose
            lmat = quat_left_matrix(qb)
            pulled = ParamGrads(
                means=g.means @ r,
                log_scales=g.log_scales.copy(),
                quats=g.quats @ lmat,
                opacity_logits=g.opacity_logits.copy(),
                colors=g.colors.copy(),
            )
        pulled.mu2d = g.mu2d.copy()
        pulled.visible = g.visible.copy()
        out[key] = pulled
    return out


# ---------------------------------------------------------------------------
# rasterization

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _project_gaussians(params: GaussianParams, intr, pose):
    """Per-Gaussian camera-frame and screen-space quantities (vectorized)."""
    n = len(params)
    r_cw = pose.rotation.T
    t = (params.means - pose.center) @ r_cw.T             # (N,3) camera frame
    scales = np.exp(params.log_scales)
    qn = quat_normalize(params.quats) if n else params.quats.copy()
    rot = quat_to_rot(qn) if n else np.zeros((0, 3, 3))
    # world covariance R diag(s^2) R^T, then camera frame
    sig3 = np.einsum("nij,nj,nkj->nik", rot, scales ** 2, rot)
    v = np.einsum("ij,njk,lk->nil", r_cw, sig3, r_cw)

    tz = t[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        j = np.zeros((n, 2, 3))
        j[:, 0, 0] = intr.fx / tz
        j[:, 1, 1] = intr.fy / tz
        j[:, 0, 2] = -intr.fx * t[:, 0] / tz ** 2
        j[:, 1, 2] = -intr.fy * t[:, 1] / tz ** 2
        mu = np.stack([intr.fx * t[:, 0] / tz + intr.cx,
                       intr.fy * t[:, 1] / tz + intr.cy], axis=1)
    cov2 = np.einsum("nab,nbc,ndc->nad", j, v, j)
    cov2[:, 0, 0] += COV2D_REG
    cov2[:, 1, 1] += COV2D_REG

    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] * cov2[:, 1, 0]
    inv2 = np.empty_like(cov2)
    inv2[:, 0, 0] = cov2[:, 1, 1] / det
    inv2[:, 1, 1] = cov2[:, 0, 0] / det
    inv2[:, 0, 1] = -cov2[:, 0, 1] / det
    inv2[:, 1, 0] = -cov2[:, 1, 0] / det

    mid = 0.5 * (cov2[:, 0, 0] + cov2[:, 1, 1])
    disc = np.sqrt(np.maximum(mid ** 2 - det, 0.0))
    radius = CULL_SIGMA * np.sqrt(np.maximum(mid + disc, 1e-12))

    # per-splat normal: shortest activated-scale axis, facing the camera
    k = np.argmin(scales, axis=1)
    n_raw = np.take_along_axis(rot, k[:, None, None].repeat(3, axis=1), axis=2)[:, :, 0] \
        if n else np.zeros((0, 3))
    view = params.means - pose.center
    dots = np.sum(n_raw * view, axis=1)
    sign = np.where(dots > 0, -1.0, 1.0)
    normal = sign[:, None] * n_raw

    opac = _sigmoid(params.opacity_logits)
    return dict(t=t, scales=scales, qn=qn, qnorm=np.linalg.norm(params.quats, axis=1) if n else np.zeros(0),
                rot=rot, sig3=sig3, v=v, j=j, mu=mu, cov2=cov2, inv2=inv2,
                radius=radius, axis=k, sign=sign, normal=normal, opac=opac,
                r_cw=r_cw)


def rasterize(params: GaussianParams, intr: CameraIntrinsics, pose: CameraPose,
              return_cache: bool = False):
    """Front-to-back alpha compositing of projected Gaussians.

    Outputs color, expected depth (meters), composited unit normals and
    accumulated alpha. Per-pixel compositing terminates once transmittance
    drops below 1e-4. With return_cache=True the per-splat state needed by
    rasterize_backward is kept.
    """
    h, w = intr.height, intr.width
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    nacc = np.zeros((h, w, 3))
    alpha = np.zeros((h, w))
    trans = np.ones((h, w))

    geo = _project_gaussians(params, intr, pose) if len(params) else None
    entries = []
    order = np.zeros(0, dtype=np.int64)
    if geo is not None:
        visible = geo["t"][:, 2] > NEAR_CLIP
        vis_idx = np.flatnonzero(visible)
        order = vis_idx[np.argsort(geo["t"][vis_idx, 2], kind="stable")]

    for gi in order:
        u, v = geo["mu"][gi]
        rad = geo["radius"][gi]
        j0 = max(int(np.ceil(u - rad - 0.5)), 0)
        j1 = min(int(np.floor(u + rad - 0.5)) + 1, w)
        i0 = max(int(np.ceil(v - rad - 0.5)), 0)
        i1 = min(int(np.floor(v + rad - 0.5)) + 1, h)
        if j0 >= j1 or i0 >= i1:
            continue
        px = np.arange(j0, j1) + 0.5 - u
        py = np.arange(i0, i1) + 0.5 - v
        dx, dy = np.meshgrid(px, py)
        a = geo["inv2"][gi]
        quad = a[0, 0] * dx * dx + (a[0, 1] + a[1, 0]) * dx * dy + a[1, 1] * dy * dy
        g = np.exp(-0.5 * quad)
        al = geo["opac"][gi] * g

        t_here = trans[i0:i1, j0:j1].copy()
        mask = t_here >= TRANSMITTANCE_FLOOR
        wgt = np.where(mask, t_here * al, 0.0)

        color[i0:i1, j0:j1] += wgt[:, :, None] * params.colors[gi]
        depth[i0:i1, j0:j1] += wgt * geo["t"][gi, 2]
        nacc[i0:i1, j0:j1] += wgt[:, :, None] * geo["normal"][gi]
        alpha[i0:i1, j0:j1] += wgt
        trans[i0:i1, j0:j1] = t_here * (1.0 - al)

        if return_cache:
            entries.append(dict(gi=int(gi), bbox=(i0, i1, j0, j1), g=g, alpha=al,
                                t_before=t_here, wgt=wgt, dx=dx, dy=dy))

    nrm = np.linalg.norm(nacc, axis=2)
    safe = nrm > 1e-12
    normal = np.zeros_like(nacc)
    normal[safe] = nacc[safe] / nrm[safe][:, None]

    outputs = RenderOutputs(color=color, depth=depth[:, :, None], normal=normal,
                            alpha=alpha[:, :, None])
    if not return_cache:
        return outputs
    cache = dict(geo=geo, entries=entries, nacc=nacc, nrm=nrm, params=params,
                 intr=intr, pose=pose)
    return outputs, cache


def rasterize_backward(cache, grad_color=None, grad_depth=None, grad_normal=None,
                       grad_alpha=None) -> ParamGrads:
    """Analytic gradients of the render outputs w.r.t. every parameter group.

    Upstream gradients default to zero; shapes follow RenderOutputs fields.
    """
    geo = cache["geo"]
    params = cache["params"]
    intr = cache["intr"]
    n = len(params)
    grads = ParamGrads.zeros(n)
    if geo is None or not cache["entries"]:
        return grads

    h, w = intr.height, intr.width
    gc = np.zeros((h, w, 3)) if grad_color is None else np.asarray(grad_color, dtype=np.float64)
    gd = np.zeros((h, w)) if grad_depth is None else np.asarray(grad_depth, dtype=np.float64).reshape(h, w)
    gn = np.zeros((h, w, 3)) if grad_normal is None else np.asarray(grad_normal, dtype=np.float64)
    ga = np.zeros((h, w)) if grad_alpha is None else np.asarray(grad_alpha, dtype=np.float64).reshape(h, w)

    # back through the normalization of the accumulated normal
    nrm = cache["nrm"]
    nacc = cache["nacc"]
    gnacc = np.zeros_like(gn)
    safe = nrm > 1e-12
    if safe.any():
        unit = nacc[safe] / nrm[safe][:, None]
        proj = np.sum(unit * gn[safe], axis=1, keepdims=True)
        gnacc[safe] = (gn[safe] - unit * proj) / nrm[safe][:, None]

    entries = cache["entries"]

    # pass 1: total per-pixel sum of w_j * dL/dw_j
    a_total = np.zeros((h, w))
    dldw_list = []
    for e in entries:
        gi = e["gi"]
        i0, i1, j0, j1 = e["bbox"]
        dldw = (gc[i0:i1, j0:j1] @ params.colors[gi]
                + gd[i0:i1, j0:j1] * geo["t"][gi, 2]
                + gnacc[i0:i1, j0:j1] @ geo["normal"][gi]
                + ga[i0:i1, j0:j1])
        dldw_list.append(dldw)
        a_total[i0:i1, j0:j1] += e["wgt"] * dldw

    # pass 2: prefix accumulation gives each splat's alpha gradient
    prefix = np.zeros((h, w))
    d_mu = np.zeros((n, 2))
    d_a = np.zeros((n, 2, 2))
    d_z = np.zeros(n)
    d_opac = np.zeros(n)
    d_normal = np.zeros((n, 3))
    touched = np.zeros(n, dtype=bool)

    for e, dldw in zip(entries, dldw_list):
        gi = e["gi"]
        i0, i1, j0, j1 = e["bbox"]
        contrib = e["wgt"] * dldw
        prefix[i0:i1, j0:j1] += contrib
        behind = a_total[i0:i1, j0:j1] - prefix[i0:i1, j0:j1]
        mask = e["t_before"] >= TRANSMITTANCE_FLOOR
        # every splat behind a saturated one is masked, so behind == 0 there
        one_minus = 1.0 - e["alpha"]
        ratio = np.divide(behind, one_minus, out=np.zeros_like(behind),
                          where=one_minus > 1e-12)
        d_alpha = np.where(mask, e["t_before"] * dldw - ratio, 0.0)

        grads.colors[gi] += np.einsum("ij,ijc->c", e["wgt"], gc[i0:i1, j0:j1])
        d_z[gi] += np.sum(e["wgt"] * gd[i0:i1, j0:j1])
        d_normal[gi] += np.einsum("ij,ijc->c", e["wgt"], gnacc[i0:i1, j0:j1])

        d_g = d_alpha * geo["opac"][gi]
        d_opac[gi] += np.sum(d_alpha * e["g"])
        # dG/dmu = G * (A d); dG/dA = -1/2 G d d^T
        gg = d_g * e["g"]
        av = geo["inv2"][gi]
        adx = av[0, 0] * e["dx"] + av[0, 1] * e["dy"]
        ady = av[1, 0] * e["dx"] + av[1, 1] * e["dy"]
        d_mu[gi, 0] += np.sum(gg * adx)
        d_mu[gi, 1] += np.sum(gg * ady)
        d_a[gi, 0, 0] += -0.5 * np.sum(gg * e["dx"] * e["dx"])
        d_a[gi, 0, 1] += -0.5 * np.sum(gg * e["dx"] * e["dy"])
        d_a[gi, 1, 0] += -0.5 * np.sum(gg * e["dy"] * e["dx"])
        d_a[gi, 1, 1] += -0.5 * np.sum(gg * e["dy"] * e["dy"])
        touched[gi] = True

    grads.mu2d = d_mu
    grads.visible = touched
    idx = np.flatnonzero(touched)
    if idx.size == 0:
        return grads

    t = geo["t"][idx]
    inv2 = geo["inv2"][idx]
    jmat = geo["j"][idx]
    vmat = geo["v"][idx]
    rot = geo["rot"][idx]
    scales = geo["scales"][idx]
    opac = geo["opac"][idx]
    r_cw = geo["r_cw"]

    # opacity logit
    grads.opacity_logits[idx] = d_opac[idx] * opac * (1.0 - opac)

    # inverse-covariance -> covariance -> (J, V)
    s2 = -np.einsum("nij,njk,nkl->nil", inv2, d_a[idx], inv2)
    s2 = 0.5 * (s2 + np.transpose(s2, (0, 2, 1)))
    d_j = 2.0 * np.einsum("nab,nbc,ncd->nad", s2, jmat, vmat)
    d_v = np.einsum("nba,nbc,ncd->nad", jmat, s2, jmat)
    d_sig3 = np.einsum("ji,njk,kl->nil", r_cw, d_v, r_cw)

    # camera-frame position gradient: through J, the projection and depth
    fx, fy = intr.fx, intr.fy
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    d_t = np.einsum("nab,na->nb", jmat, d_mu[idx])
    d_t[:, 0] += d_j[:, 0, 2] * (-fx / tz ** 2)
    d_t[:, 1] += d_j[:, 1, 2] * (-fy / tz ** 2)
    d_t[:, 2] += (d_j[:, 0, 0] * (-fx / tz ** 2)
                  + d_j[:, 1, 1] * (-fy / tz ** 2)
                  + d_j[:, 0, 2] * (2 * fx * tx / tz ** 3)
                  + d_j[:, 1, 2] * (2 * fy * ty / tz ** 3))
    d_t[:, 2] += d_z[idx]
    grads.means[idx] = d_t @ r_cw

    # world covariance -> rotation and log-scales
    diag2 = scales ** 2
    d_rot = 2.0 * np.einsum("nij,njk,nk->nik", d_sig3, rot, diag2)
    d_diag = np.einsum("nji,njk,nkl->nil", rot, d_sig3, rot)
    d_log = np.stack([d_diag[:, 0, 0], d_diag[:, 1, 1], d_diag[:, 2, 2]], axis=1)
    grads.log_scales[idx] = d_log * 2.0 * diag2

    # normal path adds into one rotation column (shortest axis, fixed sign)
    k = geo["axis"][idx]
    sgn = geo["sign"][idx]
    rows = np.arange(idx.size)
    d_rot[rows, :, k] += sgn[:, None] * d_normal[idx]

    # rotation -> unit quaternion -> raw quaternion
    dr_dq = _drot_dquat(geo["qn"][idx])
    d_qu = np.einsum("nqij,nij->nq", dr_dq, d_rot)
    qn = geo["qn"][idx]
    qnorm = geo["qnorm"][idx]
    proj = np.sum(qn * d_qu, axis=1, keepdims=True)
    grads.quats[idx] = (d_qu - qn * proj) / qnorm[:, None]

    return grads


# ---------------------------------------------------------------------------
# densify / prune maintenance

@dataclass
class GradStats:
    """Accumulated screen-space positional gradient statistics."""

    accum: np.ndarray  # (N,) summed |dL/dmu2D|
    denom: np.ndarray  # (N,) number of steps the splat was in frustum

    @staticmethod
    def zeros(n) -> "GradStats":
        return GradStats(np.zeros(n), np.zeros(n))

    def mean(self) -> np.ndarray:
        return self.accum / np.maximum(self.denom, 1.0)


@dataclass
class DensifyReport:
    keep_mask: np.ndarray
    n_cloned: int
    n_split: int
    n_pruned: int

    @property
    def n_appended(self) -> int:
        return self.n_cloned + 2 * self.n_split


def densify_and_prune(params: GaussianParams, stats: GradStats, grad_threshold: float,
                      split_scale: float, prune_opacity: float = PRUNE_OPACITY):
    """Clone small / split large high-gradient Gaussians and prune faint ones.

    Split parents are replaced by two children with halved scales, offset by
    +/- half the largest principal axis. Appended entries come after the kept
    originals: clones first, then split children (two per parent, in index
    order), so optimizer state can be remapped with keep_mask + zeros.
    """
    n = len(params)
    mean_grad = stats.mean()
    opac = _sigmoid(params.opacity_logits)
    scales = np.exp(params.log_scales)
    max_scale = scales.max(axis=1)

    alive = opac >= prune_opacity
    hot = (mean_grad > grad_threshold) & alive
    split = hot & (max_scale > split_scale)
    clone = hot & ~split
    keep = alive & ~split

    blocks = [params.select(keep)]
    n_cloned = int(clone.sum())
    if n_cloned:
        blocks.append(params.select(clone))
    n_split = int(split.sum())
    if n_split:
        parents = params.select(split)
        rot = quat_to_rot(quat_normalize(parents.quats))
        s = np.exp(parents.log_scales)
        kmax = np.argmax(s, axis=1)
        rows = np.arange(n_split)
        axis = rot[rows, :, kmax]
        offset = axis * (s[rows, kmax][:, None] / 2.0)
        for sign in (+1.0, -1.0):
            child = parents.copy()
            child.means = parents.means + sign * offset
            child.log_scales = parents.log_scales - np.log(2.0)
            blocks.append(child)
    out = GaussianParams.concat(blocks)
    report = DensifyReport(keep_mask=keep, n_cloned=n_cloned, n_split=n_split,
                           n_pruned=int((~alive).sum()))
    return out, report


def reset_opacity(params: GaussianParams, ceiling: float = RESET_OPACITY) -> None:
    """Clamp all opacities down to `ceiling` (in activated units), in place."""
    logit = float(np.log(ceiling / (1.0 - ceiling)))
    np.minimum(params.opacity_logits, logit, out=params.opacity_logits)


# ---------------------------------------------------------------------------
# checkpoint io

def save_cloud(cloud: GaussianCloud, out_dir, step: int) -> None:
    """Checkpoint: one .fmap per parameter group plus a JSON manifest.

    The manifest is written last via rename, so its presence marks a complete
    checkpoint.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def dump(prefix, params):
        for g in PARAM_GROUPS:
            arr = getattr(params, g)
            if arr.ndim == 1:
                arr = arr[:, None]
            save_fmap(out / f"{prefix}_{g}.fmap", arr[:, None, :])

    dump("static", cloud.static)
    for iid, (params, _) in sorted(cloud.instances.items()):
        dump(f"inst_{iid}", params)
    manifest = {
        "step": step,
        "static_count": len(cloud.static),
        "instances": {str(iid): len(p) for iid, (p, _) in sorted(cloud.instances.items())},
    }
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    tmp.replace(out / "manifest.json")


def load_cloud(ckpt_dir, boxes=None):
    """Inverse of save_cloud; boxes rebind instance sets by id."""
    ckpt = Path(ckpt_dir)
    manifest = json.loads((ckpt / "manifest.json").read_text())
    by_id = {b.id: b for b in (boxes or [])}

    def pull(prefix):
        arrs = []
        for g in PARAM_GROUPS:
            a = load_fmap(ckpt / f"{prefix}_{g}.fmap").astype(np.float64)[:, 0, :]
            if g == "opacity_logits":
                a = a[:, 0]
            arrs.append(a)
        return GaussianParams(*arrs)

    static = pull("static")
    instances = {}
    for sid in manifest["instances"]:
        iid = int(sid)
        if iid not in by_id:
            raise MissingFramePose(f"checkpoint references instance {iid} with no box")
        instances[iid] = (pull(f"inst_{iid}"), by_id[iid])
    return GaussianCloud(static=static, instances=instances), manifest["step"]
