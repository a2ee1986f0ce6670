#!/usr/bin/env python3
"""Generate a small on-disk scene: occupancy grid, one instance box, forward
cameras and their lossless ground-truth images (the semantic renders).

The output directory is ready for `evsforge distill`.
"""

import argparse
from pathlib import Path

import numpy as np

from evsforge.camera import CameraIntrinsics, CameraPose, save_cameras
from evsforge.condition import BoundingBox3D, render_conditions, save_boxes
from evsforge.fmap import save_fmap
from evsforge.grid import OccupancyGrid, default_palette, save_grid


def two_wall_grid():
    dims = (48, 40, 16)
    h = 0.25
    origin = np.array([-6.0, 0.0, -2.0])
    labels = np.zeros(dims[0] * dims[1] * dims[2], dtype=np.uint8)

    def put(ix, iy, iz, lab):
        labels[ix + dims[0] * (iy + dims[1] * iz)] = lab

    for ix in range(14, 34):
        for iz in range(5, 11):
            put(ix, 24, iz, 13)   # building wall facing the cameras
    for iy in range(6, 22):
        for iz in range(5, 11):
            put(6, iy, iz, 9)     # road-colored side wall, off-axis
    return OccupancyGrid(dims=dims, voxel_size=h, origin=origin, labels=labels)


def forward_pose(center):
    r = np.column_stack([[1.0, 0, 0], [0, 0, -1.0], [0, 1.0, 0]])
    return CameraPose.from_rt(r, np.asarray(center, dtype=np.float64))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="fixture", help="output directory")
    ap.add_argument("--size", type=int, default=32, help="image size in pixels")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = two_wall_grid()
    save_grid(grid, out / "scene.occ")

    box = BoundingBox3D(id=1, center=np.array([0.0, 5.0, -0.5]),
                        size=np.array([1.5, 1.5, 1.0]), rotation=np.eye(3))
    save_boxes(out / "boxes.json", [box])

    f = args.size * 1.25
    intr = CameraIntrinsics(fx=f, fy=f, cx=args.size / 2, cy=args.size / 2,
                            width=args.size, height=args.size)
    cams = [(intr, forward_pose([x, 0.6, 0.0])) for x in (-0.5, 0.0, 0.5)]
    save_cameras(out / "cams.jsonl", cams)

    palette = default_palette()
    views = out / "views"
    views.mkdir(exist_ok=True)
    for i, (ci, cp) in enumerate(cams):
        cond = render_conditions(grid, palette, [box], None, ci, cp)
        save_fmap(views / f"img_{i:05d}.fmap", cond.S)
    print(f"fixture written to {out}/ (grid, boxes, {len(cams)} cameras, views)")


if __name__ == "__main__":
    main()
