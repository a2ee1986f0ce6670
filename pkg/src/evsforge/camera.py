"""Pinhole cameras, rigid poses, and extrapolated-view trajectory generation.

Conventions: camera X points right, Y down, Z forward. Poses are 4x4
world-from-camera transforms. The world up axis defaults to +Z and is
configurable per dataset.

Three extrapolated-view families, each at three difficulty levels:
  D     pitch the camera down by a fixed angle about its own X axis, then
        lift it along world up by 0.2 / 0.4 / 0.6 m.
  LR    yaw about the world up axis through the camera center; level bands
        are <=15 deg (Easy), 15-45 (Middle), >=45 (Hard).
  LR-D  LR followed by D.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InvalidSpec

WORLD_UP_DEFAULT = np.array([0.0, 0.0, 1.0])

D_PITCH_DEG = 10.0
D_LIFTS_M = {"Easy": 0.2, "Middle": 0.4, "Hard": 0.6}
LR_DEFAULT_ANGLES_DEG = {"Easy": 10.0, "Middle": 30.0, "Hard": 60.0}

FAMILIES = ("D", "LR", "LR-D")
LEVELS = ("Easy", "Middle", "Hard")


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass(frozen=True)
class CameraPose:
    """Rigid world-from-camera transform."""

    world_from_camera: np.ndarray  # (4, 4)

    def __post_init__(self):
        m = np.asarray(self.world_from_camera, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "world_from_camera", m)
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation block is not orthonormal")
        if np.linalg.det(r) < 0:
            raise ValueError("rotation block must have determinant +1")
        if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-12):
            raise ValueError("bottom row must be (0,0,0,1)")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_from_camera[:3, :3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.world_from_camera[:3, 3]

    @property
    def forward(self) -> np.ndarray:
        """World-space viewing direction (camera +Z)."""
        return self.rotation[:, 2]

    def camera_from_world(self) -> np.ndarray:
        r = self.rotation
        out = np.eye(4)
        out[:3, :3] = r.T
        out[:3, 3] = -r.T @ self.center
        return out

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.eye(4))

    @staticmethod
    def from_rt(rotation, translation) -> "CameraPose":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return CameraPose(m)


@dataclass(frozen=True)
class EvsSpec:
    """One extrapolated-view variant: family, level and its parameters.

    Level presets pin lr_angle_deg and d_lift_m to their defaults; custom
    values are allowed (tests use e.g. zero lift), but LR angles must stay
    inside the level's band.
    """

    family: str
    level: str
    lr_angle_deg: float = 0.0
    d_lift_m: float = 0.0
    d_pitch_deg: float = D_PITCH_DEG

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidSpec(f"unknown family {self.family!r}")
        if self.level not in LEVELS:
            raise InvalidSpec(f"unknown level {self.level!r}")

    @staticmethod
    def for_level(family: str, level: str, lr_angle_deg: float | None = None,
                  d_lift_m: float | None = None) -> "EvsSpec":
        """Spec with the level's representative angle / lift filled in."""
        spec = EvsSpec(family=family, level=level)
        if family in ("LR", "LR-D"):
            angle = LR_DEFAULT_ANGLES_DEG[level] if lr_angle_deg is None else lr_angle_deg
            spec = replace(spec, lr_angle_deg=angle)
        if family in ("D", "LR-D"):
            lift = D_LIFTS_M[level] if d_lift_m is None else d_lift_m
            spec = replace(spec, d_lift_m=lift)
        return spec


def _angle_in_band(level: str, angle_deg: float) -> bool:
    a = abs(angle_deg)
    if level == "Easy":
        return a <= 15.0
    if level == "Middle":
        return 15.0 < a < 45.0
    return a >= 45.0


def _rot_x(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _axis_angle(axis, deg: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    t = math.radians(deg)
    c, s = math.cos(t), math.sin(t)
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) * c + s * k + (1 - c) * np.outer(axis, axis)


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] = -u[:, -1]
        out = u @ vt
    return out


def project(intr: CameraIntrinsics, pose: CameraPose, p):
    """Project a world point; returns (u, v, z) or None when behind the camera.

    z is the camera-frame depth in meters.
    """
    p = np.asarray(p, dtype=np.float64)
    q = pose.rotation.T @ (p - pose.center)
    if q[2] <= 1e-6:
        return None
    u = intr.fx * q[0] / q[2] + intr.cx
    v = intr.fy * q[1] / q[2] + intr.cy
    return (float(u), float(v), float(q[2]))


def make_evs(poses, spec: EvsSpec, world_up=WORLD_UP_DEFAULT):
    """Derive extrapolated poses from test poses per the family definition.

    D   : post-rotate each pose by d_pitch_deg about its own camera X axis
          (look downward), then translate the center by d_lift_m along world up.
    LR  : pre-rotate by lr_angle_deg about the world up axis through the
          camera center; the center is unchanged.
    LR-D: LR then D.
    """
    if spec.family in ("LR", "LR-D") and not _angle_in_band(spec.level, spec.lr_angle_deg):
        raise InvalidSpec(
            f"lr_angle_deg {spec.lr_angle_deg} outside the {spec.level} band"
        )
    up = np.asarray(world_up, dtype=np.float64)
    up = up / np.linalg.norm(up)

    out = []
    for pose in poses:
        r = pose.rotation
        c = pose.center.copy()
        if spec.family in ("LR", "LR-D"):
            r = _axis_angle(up, spec.lr_angle_deg) @ r
        if spec.family in ("D", "LR-D"):
            r = r @ _rot_x(spec.d_pitch_deg)
            c = c + spec.d_lift_m * up
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-9:
            r = _orthonormalize(r)
        out.append(CameraPose.from_rt(r, c))
    return out


def save_cameras(path, cameras) -> None:
    """JSON-lines camera file: one {intr, world_from_camera} object per line."""
    path = Path(path)
    lines = []
    for intr, pose in cameras:
        obj = {
            "intr": {
                "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
                "w": intr.width, "h": intr.height,
            },
            "world_from_camera": [float(v) for v in pose.world_from_camera.reshape(-1)],
        }
        lines.append(json.dumps(obj))
    path.write_text("\n".join(lines) + "\n")


def load_cameras(path):
    """Inverse of save_cameras; returns a list of (intrinsics, pose) pairs."""
    cameras = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        obj = json.loads(line)
        i = obj["intr"]
        intr = CameraIntrinsics(fx=i["fx"], fy=i["fy"], cx=i["cx"], cy=i["cy"],
                                width=int(i["w"]), height=int(i["h"]))
        m = np.array(obj["world_from_camera"], dtype=np.float64).reshape(4, 4)
        cameras.append((intr, CameraPose(m)))
    return cameras
