"""Hierarchical semantic-geometric condition rendering.

Per view this produces three maps and their 13-channel packing:
  S (H,W,3)  semantic colors from the first occupied voxel along each pixel ray
  D (H,W,1)  entry-face depth of that voxel, divided by the far clip; 0 = no hit
  R (H,W,9)  camera-frame rotation of the nearest 3D box covering the pixel,
             flattened row-major; the zero vector marks "no instance"
  C = [R | S | D] channel-concatenated, in that order.

Voxels are walked with an exact integer-stepping traversal (no tunable step
size), vectorized across all pixel rays in lockstep.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, CameraPose
from .errors import MissingFramePose, ShapeMismatch
from .grid import OccupancyGrid, SemanticPalette


@dataclass(frozen=True)
class BoundingBox3D:
    """Oriented 3D box; world-from-box rotation, full extents in meters."""

    id: int
    center: np.ndarray          # (3,)
    size: np.ndarray            # (3,) length, width, height
    rotation: np.ndarray        # (3, 3) world-from-box
    per_frame_pose: dict | None = None  # frame -> (center, rotation)

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "size", np.asarray(self.size, dtype=np.float64))
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        object.__setattr__(self, "rotation", r)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or np.linalg.det(r) < 0:
            raise ValueError("box rotation must be orthonormal with det +1")
        if np.any(self.size <= 0):
            raise ValueError("box size components must be positive")

    @property
    def dynamic(self) -> bool:
        return self.per_frame_pose is not None

    def pose_at(self, frame):
        """(center, rotation) at a frame; static boxes ignore the frame."""
        if self.per_frame_pose is None:
            return self.center, self.rotation
        if frame not in self.per_frame_pose:
            raise MissingFramePose(f"box {self.id} has no pose for frame {frame}")
        c, r = self.per_frame_pose[frame]
        return np.asarray(c, dtype=np.float64), np.asarray(r, dtype=np.float64).reshape(3, 3)

    def corners(self, frame=None) -> np.ndarray:
        """(8, 3) world-space corner positions."""
        c, r = self.pose_at(frame)
        half = self.size / 2.0
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=np.float64,
        )
        return c + (signs * half) @ r.T


@dataclass(frozen=True)
class ConditionMaps:
    S: np.ndarray  # (H, W, 3) in [0,1]
    D: np.ndarray  # (H, W, 1) in [0,1], 0 = no hit
    R: np.ndarray  # (H, W, 9)
    C: np.ndarray  # (H, W, 13) = [R | S | D]

    @staticmethod
    def build(S, D, R) -> "ConditionMaps":
        return ConditionMaps(S=S, D=D, R=R, C=pack_control(S, D, R))


def _pixel_ray_dirs(intr: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    """(H*W, 3) world ray directions through pixel centers, scaled so the ray
    parameter equals camera-frame depth."""
    jj, ii = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    x = (jj.ravel() + 0.5 - intr.cx) / intr.fx
    y = (ii.ravel() + 0.5 - intr.cy) / intr.fy
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=1)
    return dirs_cam @ pose.rotation.T


def trace_grid(grid: OccupancyGrid, intr: CameraIntrinsics, pose: CameraPose,
               far: float | None = None):
    """First-hit voxel per pixel ray via exact integer voxel stepping.

    Returns (hit, labels, depth, voxel) where hit is (H*W,) bool, labels the
    semantic label of the first occupied voxel, depth the camera-frame z of
    the ray's entry point into it, and voxel the (H*W, 3) integer indices
    (-1 where no hit). Rays whose entry depth exceeds `far` count as misses.
    """
    far = grid.diagonal if far is None else float(far)
    n = intr.width * intr.height
    nx, ny, nz = grid.dims
    dims = np.array([nx, ny, nz], dtype=np.int64)
    h = grid.voxel_size
    lo = grid.origin
    extent = dims.astype(np.float64) * h

    o = pose.center
    d = _pixel_ray_dirs(intr, pose)

    hit = np.zeros(n, dtype=bool)
    out_label = np.zeros(n, dtype=np.uint8)
    out_t = np.zeros(n, dtype=np.float64)
    out_voxel = np.full((n, 3), -1, dtype=np.int64)

    # Clip rays to the grid box (slab test), handling zero direction components.
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (lo - o) / d
        t_hi = (lo + extent - o) / d
    zero = d == 0.0
    inside = (o >= lo) & (o < lo + extent)
    t_near = np.where(zero, np.where(inside, -np.inf, np.inf), np.minimum(t_lo, t_hi))
    t_far = np.where(zero, np.where(inside, np.inf, -np.inf), np.maximum(t_lo, t_hi))
    t_enter = np.maximum(t_near.max(axis=1), 0.0)
    t_exit = t_far.min(axis=1)
    active = (t_exit > t_enter) & (t_enter <= far)

    p0 = o + t_enter[:, None] * d
    iv = np.floor((p0 - lo) / h).astype(np.int64)
    np.clip(iv, 0, dims - 1, out=iv)

    step = np.sign(d).astype(np.int64)
    next_face = lo + (iv + (step > 0)) * h
    with np.errstate(divide="ignore", invalid="ignore"):
        t_max = (next_face - o) / d
        t_delta = h / np.abs(d)
    t_max[zero] = np.inf
    t_delta[zero] = np.inf

    t_entry = t_enter.copy()
    labels = grid.labels
    idx_all = np.arange(n)
    max_iters = int(dims.sum()) + 3

    for _ in range(max_iters):
        if not active.any():
            break
        a = idx_all[active]
        va = iv[a]
        flat = va[:, 0] + nx * (va[:, 1] + ny * va[:, 2])
        lab = labels[flat]

        too_far = t_entry[a] > far
        found = (lab != 0) & ~too_far
        hit_idx = a[found]
        hit[hit_idx] = True
        out_label[hit_idx] = lab[found]
        out_t[hit_idx] = t_entry[hit_idx]
        out_voxel[hit_idx] = va[found]
        active[a[too_far]] = False
        active[hit_idx] = False

        a = idx_all[active]
        if a.size == 0:
            break
        tm = t_max[a]
        axis = np.argmin(tm, axis=1)
        rows = np.arange(a.size)
        t_entry[a] = tm[rows, axis]
        iv[a, axis] += step[a, axis]
        t_max[a, axis] += t_delta[a, axis]
        moved = iv[a]
        escaped = np.any((moved < 0) | (moved >= dims), axis=1)
        active[a[escaped]] = False

    return hit, out_label, out_t, out_voxel


def render_scene_prior(grid: OccupancyGrid, palette: SemanticPalette,
                       intr: CameraIntrinsics, pose: CameraPose,
                       far: float | None = None):
    """Render the scene-level semantic map S and normalized depth map D."""
    far = grid.diagonal if far is None else float(far)
    hit, label, t, _ = trace_grid(grid, intr, pose, far)
    s = np.zeros((intr.height * intr.width, 3))
    s[hit] = palette.color01(label[hit])
    d = np.zeros(intr.height * intr.width)
    d[hit] = t[hit] / far
    return (s.reshape(intr.height, intr.width, 3),
            d.reshape(intr.height, intr.width, 1))


def _convex_hull_2d(pts: np.ndarray) -> np.ndarray:
    """Counterclockwise convex hull (monotone chain); may return < 3 points."""
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def turn(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    def half(points):
        out = []
        for p in points:
            while len(out) >= 2 and turn(out[-2], out[-1], p) <= 0:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def render_rotation_map(boxes, frame, intr: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    """Instance rotation map R: pixels covered by a box's projected footprint
    hold its camera-frame rotation, flattened row-major. The nearest box
    (smallest camera-frame center depth) wins overlaps."""
    R = np.zeros((intr.height, intr.width, 9))
    depth_buf = np.full((intr.height, intr.width), np.inf)
    r_cw = pose.rotation.T
    cam_c = pose.center

    for box in boxes:
        center, m_world = box.pose_at(frame)
        m_cam = r_cw @ m_world
        z_center = (r_cw @ (center - cam_c))[2]
        corners = box.corners(frame)
        q = (corners - cam_c) @ r_cw.T
        front = q[:, 2] > 1e-6
        if front.sum() < 3:
            continue
        qf = q[front]
        uv = np.stack([
            intr.fx * qf[:, 0] / qf[:, 2] + intr.cx,
            intr.fy * qf[:, 1] / qf[:, 2] + intr.cy,
        ], axis=1)
        hull = _convex_hull_2d(uv)
        if len(hull) < 3:
            continue

        j0 = max(int(np.floor(hull[:, 0].min() - 0.5)), 0)
        j1 = min(int(np.ceil(hull[:, 0].max() - 0.5)) + 1, intr.width)
        i0 = max(int(np.floor(hull[:, 1].min() - 0.5)), 0)
        i1 = min(int(np.ceil(hull[:, 1].max() - 0.5)) + 1, intr.height)
        if j0 >= j1 or i0 >= i1:
            continue
        jj, ii = np.meshgrid(np.arange(j0, j1), np.arange(i0, i1))
        px = jj + 0.5
        py = ii + 0.5
        inside = np.ones(px.shape, dtype=bool)
        for k in range(len(hull)):
            a = hull[k]
            b = hull[(k + 1) % len(hull)]
            inside &= (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]) >= 0
        win = inside & (z_center < depth_buf[i0:i1, j0:j1])
        depth_buf[i0:i1, j0:j1][win] = z_center
        R[i0:i1, j0:j1][win] = m_cam.reshape(9)

    return R


def pack_control(S, D, R) -> np.ndarray:
    """Concatenate [R | S | D] into the 13-channel control tensor."""
    S, D, R = np.asarray(S), np.asarray(D), np.asarray(R)
    if D.ndim == 2:
        D = D[:, :, None]
    if S.shape[:2] != D.shape[:2] or S.shape[:2] != R.shape[:2]:
        raise ShapeMismatch(f"S {S.shape}, D {D.shape}, R {R.shape} disagree on HxW")
    if S.shape[2] != 3 or D.shape[2] != 1 or R.shape[2] != 9:
        raise ShapeMismatch(
            f"channel counts must be S=3, D=1, R=9; got {S.shape[2]}, {D.shape[2]}, {R.shape[2]}"
        )
    return np.concatenate([R, S, D], axis=2)


def unpack_control(C):
    """Exact inverse of pack_control."""
    C = np.asarray(C)
    if C.ndim != 3 or C.shape[2] != 13:
        raise ShapeMismatch(f"control tensor must be HxWx13, got {C.shape}")
    return C[:, :, 9:12], C[:, :, 12:13], C[:, :, 0:9]


def render_conditions(grid, palette, boxes, frame, intr, pose, far=None) -> ConditionMaps:
    """Full per-view condition stack."""
    s, d = render_scene_prior(grid, palette, intr, pose, far)
    r = render_rotation_map(boxes, frame, intr, pose)
    return ConditionMaps.build(s, d, r)


def save_boxes(path, boxes) -> None:
    items = []
    for b in boxes:
        obj = {
            "id": b.id,
            "center": [float(v) for v in b.center],
            "size": [float(v) for v in b.size],
            "rotation": [float(v) for v in b.rotation.reshape(-1)],
        }
        if b.per_frame_pose is not None:
            obj["frames"] = {
                str(f): {
                    "center": [float(v) for v in np.asarray(c).reshape(3)],
                    "rotation": [float(v) for v in np.asarray(r).reshape(-1)],
                }
                for f, (c, r) in b.per_frame_pose.items()
            }
        items.append(obj)
    Path(path).write_text(json.dumps({"boxes": items}, indent=1))


def load_boxes(path):
    data = json.loads(Path(path).read_text())
    boxes = []
    for obj in data["boxes"]:
        frames = None
        if "frames" in obj:
            frames = {
                int(f): (np.array(p["center"]), np.array(p["rotation"]).reshape(3, 3))
                for f, p in obj["frames"].items()
            }
        boxes.append(BoundingBox3D(
            id=int(obj["id"]),
            center=np.array(obj["center"]),
            size=np.array(obj["size"]),
            rotation=np.array(obj["rotation"]).reshape(3, 3),
            per_frame_pose=frames,
        ))
    return boxes
