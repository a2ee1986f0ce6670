"""Two-stage scene optimization.

Stage 1 fits the cloud to training views with the reconstruction loss only;
stage 2 resumes from a stage-1 checkpoint and mixes reconstruction steps with
distillation steps on extrapolated cameras. Starting stage 2 from scratch is
rejected: the distillation gradients overwhelm an uninitialized scene.

Determinism: every random decision draws from a stream derived from
(seed, step, purpose), so identical configs and seeds give bit-identical
checkpoints and telemetry, and a stage-2 run with evs_sample_prob = 0 replays
stage-1 behavior exactly.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .camera import CameraIntrinsics, CameraPose
from .condition import ConditionMaps
from .diffusion import BlurTargetDenoiser, DiffusionSchedule
from .errors import MissingStage1Checkpoint, NaNDetected
from .gsplat import (
    PARAM_GROUPS,
    GaussianCloud,
    GaussianParams,
    GradStats,
    compose_scene,
    densify_and_prune,
    pull_back_grads,
    quat_multiply,
    quat_normalize,
    rasterize,
    rasterize_backward,
    reset_opacity,
    rot_to_quat,
    save_cloud,
)
from .grid import OccupancyGrid, SemanticPalette
from .losses import (
    DistillGrads,
    LossWeights,
    TelemetryRecord,
    g_sds_grad,
    hsg_vsd_grad,
    recon_loss,
    total_step_loss,
)

OPACITY_INIT = 0.1


@dataclass(frozen=True)
class StageConfig:
    steps: int
    densification_interval: int
    opacity_reset_interval: int
    densify_from_iter: int
    densify_until_iter: int
    densify_grad_threshold: float
    lr_mean: float = 1.6e-4
    lr_scales: float = 5e-3
    lr_rot: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_mean_final_factor: float = 0.01  # exponential decay target over the stage
    split_scale: float = 0.2            # meters; splats larger than this split
    evs_sample_prob: float = 0.5        # stage 2 only

    def __post_init__(self):
        if not (self.densify_from_iter < self.densify_until_iter <= self.steps):
            raise ValueError("need densify_from_iter < densify_until_iter <= steps")
        for name in ("lr_mean", "lr_scales", "lr_rot", "lr_opacity", "lr_color"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 <= self.evs_sample_prob <= 1.0):
            raise ValueError("evs_sample_prob must be a probability")

    def lr_mean_at(self, step: int) -> float:
        frac = step / max(self.steps, 1)
        return self.lr_mean * self.lr_mean_final_factor ** frac


def stage1_defaults(**overrides) -> StageConfig:
    cfg = StageConfig(steps=15_000, densification_interval=100,
                      opacity_reset_interval=3_000, densify_from_iter=500,
                      densify_until_iter=15_000, densify_grad_threshold=0.0002)
    return replace(cfg, **overrides) if overrides else cfg


def stage2_defaults(**overrides) -> StageConfig:
    cfg = StageConfig(steps=10_000, densification_interval=2_000,
                      opacity_reset_interval=3_000, densify_from_iter=1_000,
                      densify_until_iter=10_000, densify_grad_threshold=0.0002)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class TrainView:
    intr: CameraIntrinsics
    pose: CameraPose
    image: np.ndarray              # (H, W, 3) in [0, 1]
    normal: np.ndarray | None = None
    frame: int | None = None


@dataclass
class EvsView:
    intr: CameraIntrinsics
    pose: CameraPose
    cond: ConditionMaps
    tag: str
    far: float
    frame: int | None = None


def rng_stream(seed: int, step: int, purpose: str) -> np.random.Generator:
    """Deterministic per-(seed, step, purpose) generator."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, step, zlib.crc32(purpose.encode())]))


# ---------------------------------------------------------------------------
# optimizer

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


class _AdamSet:
    def __init__(self, params: GaussianParams):
        self.t = 0
        self.m = {g: np.zeros_like(getattr(params, g)) for g in PARAM_GROUPS}
        self.v = {g: np.zeros_like(getattr(params, g)) for g in PARAM_GROUPS}

    def step(self, params: GaussianParams, grads, lrs: dict) -> None:
        self.t += 1
        bc1 = 1.0 - ADAM_B1 ** self.t
        bc2 = 1.0 - ADAM_B2 ** self.t
        for g in PARAM_GROUPS:
            grad = getattr(grads, g)
            self.m[g] = ADAM_B1 * self.m[g] + (1 - ADAM_B1) * grad
            self.v[g] = ADAM_B2 * self.v[g] + (1 - ADAM_B2) * grad * grad
            mhat = self.m[g] / bc1
            vhat = self.v[g] / bc2
            getattr(params, g)[...] -= lrs[g] * mhat / (np.sqrt(vhat) + ADAM_EPS)

    def remap(self, keep_mask, n_appended) -> None:
        for g in PARAM_GROUPS:
            kept_m = self.m[g][keep_mask]
            kept_v = self.v[g][keep_mask]
            pad = (n_appended,) + kept_m.shape[1:]
            self.m[g] = np.concatenate([kept_m, np.zeros(pad)])
            self.v[g] = np.concatenate([kept_v, np.zeros(pad)])

    def zero_group(self, group: str) -> None:
        self.m[group][...] = 0.0
        self.v[group][...] = 0.0


class _Optimizer:
    """Adam over the static set and every instance set, with densify stats."""

    def __init__(self, cloud: GaussianCloud):
        self.cloud = cloud
        self.sets = {"static": _AdamSet(cloud.static)}
        self.stats = {"static": GradStats.zeros(len(cloud.static))}
        for iid, (params, _) in cloud.instances.items():
            self.sets[("instance", iid)] = _AdamSet(params)
            self.stats[("instance", iid)] = GradStats.zeros(len(params))

    def params_of(self, key) -> GaussianParams:
        if key == "static":
            return self.cloud.static
        return self.cloud.instances[key[1]][0]

    def apply(self, pulled: dict, lrs: dict, stats_scale: float = 1.0) -> None:
        for key, grads in pulled.items():
            params = self.params_of(key)
            self.sets[key].step(params, grads, lrs)
            params.quats[...] = quat_normalize(params.quats)
            st = self.stats[key]
            st.accum += stats_scale * np.linalg.norm(grads.mu2d, axis=1)
            st.denom += grads.visible.astype(np.float64)

    def densify(self, config: StageConfig) -> None:
        for key in list(self.sets):
            params = self.params_of(key)
            new_params, report = densify_and_prune(
                params, self.stats[key], config.densify_grad_threshold,
                config.split_scale)
            if key == "static":
                self.cloud.static = new_params
            else:
                box = self.cloud.instances[key[1]][1]
                self.cloud.instances[key[1]] = (new_params, box)
            self.sets[key].remap(report.keep_mask, report.n_appended)
            self.stats[key] = GradStats.zeros(len(new_params))

    def reset_opacity(self) -> None:
        for key in list(self.sets):
            reset_opacity(self.params_of(key))
            self.sets[key].zero_group("opacity_logits")


def _densify_stats_scale(intr: CameraIntrinsics, branch_weight: float) -> float:
    """Densification thresholds apply to the unweighted branch loss in
    half-image screen units (the splatting convention the published threshold
    was tuned for), so divide the branch weight back out."""
    if branch_weight <= 0:
        return 0.0
    return 0.5 * max(intr.width, intr.height) / branch_weight


def _lrs_at(config: StageConfig, step: int) -> dict:
    return {
        "means": config.lr_mean_at(step),
        "log_scales": config.lr_scales,
        "quats": config.lr_rot,
        "opacity_logits": config.lr_opacity,
        "colors": config.lr_color,
    }


# ---------------------------------------------------------------------------
# cloud initialization

def init_cloud(grid: OccupancyGrid, boxes, palette: SemanticPalette,
               points: np.ndarray | None = None,
               init_color: np.ndarray | None = None) -> GaussianCloud:
    """Seed one Gaussian per occupied voxel center (or per provided point).

    Colors come from the palette (voxel seeding) or the point file; scales are
    isotropic at half a voxel; Gaussians inside a box at frame 0 move to that
    instance set, with means re-expressed in box coordinates.
    """
    if points is not None:
        pts = np.asarray(points, dtype=np.float64)
        means = pts[:, :3]
        colors = pts[:, 3:6] if pts.shape[1] >= 6 else np.full((len(pts), 3), 0.5)
        scale = grid.voxel_size / 2.0
    else:
        occ = grid.occupied_indices()
        means = grid.origin + (occ + 0.5) * grid.voxel_size
        nx, ny, _ = grid.dims
        flat = occ[:, 0] + nx * (occ[:, 1] + ny * occ[:, 2])
        colors = palette.color01(grid.labels[flat])
        scale = grid.voxel_size / 2.0
    if init_color is not None:
        colors = np.broadcast_to(np.asarray(init_color, dtype=np.float64),
                                 colors.shape).copy()

    n = len(means)
    opacity_logit = float(np.log(OPACITY_INIT / (1.0 - OPACITY_INIT)))
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    params = GaussianParams(
        means=np.asarray(means, dtype=np.float64),
        log_scales=np.full((n, 3), np.log(scale)),
        quats=quats,
        opacity_logits=np.full(n, opacity_logit),
        colors=np.clip(colors, 0.0, 1.0),
    )

    assigned = np.zeros(n, dtype=bool)
    instances = {}
    for box in boxes or []:
        c, r = box.pose_at(0 if box.dynamic else None)
        local = (params.means - c) @ r
        inside = np.all(np.abs(local) <= box.size / 2.0, axis=1) & ~assigned
        if not inside.any():
            instances[box.id] = (GaussianParams.empty(), box)
            continue
        assigned |= inside
        sub = params.select(inside)
        sub.means = (sub.means - c) @ r  # box frame
        qb_conj = rot_to_quat(r) * np.array([1.0, -1.0, -1.0, -1.0])
        sub.quats = quat_multiply(qb_conj, sub.quats)
        instances[box.id] = (sub, box)
    static = params.select(~assigned)
    return GaussianCloud(static=static, instances=instances)


# ---------------------------------------------------------------------------
# training loops

def _check_nan(cloud: GaussianCloud, step: int) -> None:
    if cloud.has_nan():
        raise NaNDetected(step, "cloud parameters")


def _recon_step(opt: _Optimizer, views, weights: LossWeights, config: StageConfig,
                seed: int, step: int, stage: int) -> TelemetryRecord:
    rng = rng_stream(seed, step, "view")
    view = views[int(rng.integers(len(views)))]
    params, segments = compose_scene(opt.cloud, view.frame)
    render, cache = rasterize(params, view.intr, view.pose, return_cache=True)
    recon = recon_loss(render, view.image, gt_normal=view.normal,
                       lambda_r=weights.lambda_r)
    combined = total_step_loss(weights, recon, None, render.color.shape)
    grads = rasterize_backward(cache, grad_color=combined.color,
                               grad_depth=combined.depth,
                               grad_normal=combined.normal)
    opt.apply(pull_back_grads(grads, segments), _lrs_at(config, step),
              stats_scale=_densify_stats_scale(view.intr, weights.lambda1))
    return TelemetryRecord(step=step, stage=stage, l1=recon.l1, dssim=recon.dssim,
                           lnormal=recon.lnormal)


def _distill_step(opt: _Optimizer, evs_views, weights: LossWeights,
                  config: StageConfig, schedule: DiffusionSchedule, eps_p, eps_phi,
                  geo_denoiser, seed: int, step: int) -> TelemetryRecord:
    rng = rng_stream(seed, step, "evs_view")
    view = evs_views[int(rng.integers(len(evs_views)))]
    params, segments = compose_scene(opt.cloud, view.frame)
    render, cache = rasterize(params, view.intr, view.pose, return_cache=True)

    vsd = hsg_vsd_grad(render, view.cond, view.tag, schedule, eps_p, eps_phi,
                       rng_stream(seed, step, "vsd"))
    g_depth, g_normal = g_sds_grad(render, view.far, schedule, geo_denoiser,
                                   rng_stream(seed, step, "gsds"))
    distill = DistillGrads(color=vsd, depth=g_depth, normal=g_normal)
    combined = total_step_loss(weights, None, distill, render.color.shape)
    grads = rasterize_backward(cache, grad_color=combined.color,
                               grad_depth=combined.depth,
                               grad_normal=combined.normal)
    opt.apply(pull_back_grads(grads, segments), _lrs_at(config, step),
              stats_scale=_densify_stats_scale(view.intr, weights.lambda2))
    return TelemetryRecord(step=step, stage=2, vsd_grad_norm=distill.color_norm(),
                           gsds_grad_norm=distill.geo_norm())


def _maintenance(opt: _Optimizer, config: StageConfig, step: int) -> None:
    in_window = config.densify_from_iter <= step <= config.densify_until_iter
    if in_window and step % config.densification_interval == 0:
        opt.densify(config)
    if step % config.opacity_reset_interval == 0 and step <= config.densify_until_iter:
        opt.reset_opacity()


def train_stage1(cloud: GaussianCloud, train_views, config: StageConfig,
                 weights: LossWeights | None = None, seed: int = 0,
                 out_dir=None, telemetry_path=None):
    """Reconstruction-only initialization; returns the trained cloud."""
    weights = weights or LossWeights()
    opt = _Optimizer(cloud)
    records = []
    for step in range(1, config.steps + 1):
        rec = _recon_step(opt, train_views, weights, config, seed, step, stage=1)
        _check_nan(cloud, step)
        _maintenance(opt, config, step)
        records.append(rec)
    if telemetry_path is not None:
        _append_telemetry(telemetry_path, records)
    if out_dir is not None:
        save_cloud(cloud, out_dir, step=config.steps)
    return cloud, records


def train_stage2(cloud: GaussianCloud, train_views, evs_views, denoisers,
                 config: StageConfig, schedule: DiffusionSchedule | None = None,
                 weights: LossWeights | None = None, seed: int = 0,
                 stage1_done: bool = False, out_dir=None, telemetry_path=None):
    """Joint reconstruction + distillation on sampled extrapolated cameras.

    denoisers is (eps_p, eps_phi); the geometry branch uses the blur-target
    denoiser. Requires a stage-1 result (stage1_done or a loaded checkpoint).
    """
    if not stage1_done:
        raise MissingStage1Checkpoint(
            "stage 2 must start from a stage-1 checkpoint; the combined "
            "single-stage run fails")
    weights = weights or LossWeights()
    schedule = schedule or DiffusionSchedule()
    eps_p, eps_phi = denoisers
    geo = BlurTargetDenoiser(schedule)
    opt = _Optimizer(cloud)
    records = []
    for step in range(1, config.steps + 1):
        branch_rng = rng_stream(seed, step, "branch")
        use_evs = evs_views and branch_rng.random() < config.evs_sample_prob
        if use_evs:
            rec = _distill_step(opt, evs_views, weights, config, schedule,
                                eps_p, eps_phi, geo, seed, step)
        else:
            rec = _recon_step(opt, train_views, weights, config, seed, step, stage=2)
        _check_nan(cloud, step)
        _maintenance(opt, config, step)
        records.append(rec)
    if telemetry_path is not None:
        _append_telemetry(telemetry_path, records)
    if out_dir is not None:
        save_cloud(cloud, out_dir, step=config.steps)
    return cloud, records


def _append_telemetry(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")


# ---------------------------------------------------------------------------
# config file

@dataclass
class TrainSetup:
    stage1: StageConfig
    stage2: StageConfig
    weights: LossWeights
    schedule: DiffusionSchedule


def load_config(path=None) -> TrainSetup:
    """TOML with [stage1]/[stage2]/[weights]/[schedule] tables; missing keys
    fall back to the stage defaults."""
    data = {}
    if path is not None:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    s1 = stage1_defaults(**data.get("stage1", {}))
    s2 = stage2_defaults(**data.get("stage2", {}))
    weights = LossWeights(**data.get("weights", {}))
    schedule = DiffusionSchedule(**data.get("schedule", {}))
    return TrainSetup(stage1=s1, stage2=s2, weights=weights, schedule=schedule)
