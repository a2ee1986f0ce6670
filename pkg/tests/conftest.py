import numpy as np
import pytest

from evsforge.camera import CameraIntrinsics, CameraPose, save_cameras
from evsforge.condition import BoundingBox3D, save_boxes
from evsforge.grid import OccupancyGrid, default_palette, save_grid


@pytest.fixture(scope="session")
def palette():
    return default_palette()


def random_grid(rng, dims=(16, 16, 16), voxel_size=0.2, origin=None, fill=0.03,
                n_labels=18):
    """Sparse random occupancy grid for traversal tests."""
    nx, ny, nz = dims
    n = nx * ny * nz
    labels = np.zeros(n, dtype=np.uint8)
    occupied = rng.random(n) < fill
    labels[occupied] = rng.integers(1, n_labels + 1, size=int(occupied.sum()))
    if origin is None:
        origin = np.zeros(3)
    return OccupancyGrid(dims=dims, voxel_size=voxel_size, origin=np.asarray(origin),
                         labels=labels)


def simple_intrinsics(size=32, focal=None):
    focal = focal if focal is not None else size * 1.2
    return CameraIntrinsics(fx=focal, fy=focal, cx=size / 2, cy=size / 2,
                            width=size, height=size)


def looking_at_grid_pose(grid, distance=1.0, up=(0.0, 0.0, 1.0)):
    """Camera outside the grid on the -y side, looking along +y at its center.

    Camera axes: X right = world +x, Y down = world -z, Z forward = world +y.
    """
    center = grid.origin + grid.extent / 2
    # columns are the camera x (right), y (down), z (forward) axes in world
    r = np.column_stack([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    c = center.copy()
    c[1] = grid.origin[1] - distance
    return CameraPose.from_rt(r, c)


def write_fixture_scene(root, size=16, n_cameras=2, seed=100):
    """Small on-disk scene: 16^3 grid, one box, cameras looking along +y.

    Returns (grid_path, boxes_path, cameras_path, grid, cameras).
    """
    rng = np.random.default_rng(seed)
    grid = random_grid(rng, dims=(size, size, size), fill=0.05,
                       origin=np.array([-size * 0.1, 0.0, -size * 0.1]))
    grid_path = root / "scene.occ"
    save_grid(grid, grid_path)

    box = BoundingBox3D(id=1, center=grid.origin + grid.extent / 2,
                        size=np.array([1.0, 1.0, 1.0]), rotation=np.eye(3))
    boxes_path = root / "boxes.json"
    save_boxes(boxes_path, [box])

    intr = simple_intrinsics(24)
    cams = []
    for i in range(n_cameras):
        pose = looking_at_grid_pose(grid, distance=0.8 + 0.3 * i)
        cams.append((intr, pose))
    cameras_path = root / "cams.jsonl"
    save_cameras(cameras_path, cams)
    return grid_path, boxes_path, cameras_path, grid, cams
