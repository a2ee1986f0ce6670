import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evsforge.errors import BadMagic, LabelOutOfRange, TruncatedFile
from evsforge.grid import OccupancyGrid, load_grid, save_grid, voxel_at

from conftest import random_grid


def test_all_empty_roundtrip(tmp_path, palette):
    grid = OccupancyGrid(dims=(2, 2, 2), voxel_size=0.2, origin=np.zeros(3),
                         labels=np.zeros(8, dtype=np.uint8))
    p = tmp_path / "empty.occ"
    save_grid(grid, p)
    loaded = load_grid(p)
    assert loaded.dims == (2, 2, 2)
    assert loaded.voxel_size == pytest.approx(0.2)
    assert np.all(loaded.labels == 0)


def test_perception_range_extent():
    grid = OccupancyGrid(dims=(256, 256, 32), voxel_size=0.2, origin=np.zeros(3),
                         labels=np.zeros(256 * 256 * 32, dtype=np.uint8))
    assert np.allclose(grid.extent, [51.2, 51.2, 6.4])


def test_roundtrip_random_labels(tmp_path):
    rng = np.random.default_rng(7)
    grid = random_grid(rng, dims=(16, 16, 16), fill=0.3)
    p = tmp_path / "g.occ"
    save_grid(grid, p)
    loaded = load_grid(p)
    assert np.array_equal(loaded.labels, grid.labels)
    assert loaded.dims == grid.dims
    assert np.array_equal(loaded.origin, grid.origin)


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.occ"
    p.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(BadMagic) as ei:
        load_grid(p)
    assert ei.value.offset == 0


def test_truncated(tmp_path):
    rng = np.random.default_rng(0)
    grid = random_grid(rng, dims=(4, 4, 4))
    p = tmp_path / "g.occ"
    save_grid(grid, p)
    data = p.read_bytes()
    p.write_bytes(data[:-10])
    with pytest.raises(TruncatedFile):
        load_grid(p)


def test_label_out_of_range_offset(tmp_path):
    grid = OccupancyGrid(dims=(2, 2, 2), voxel_size=0.2, origin=np.zeros(3),
                         labels=np.zeros(8, dtype=np.uint8))
    p = tmp_path / "g.occ"
    save_grid(grid, p)
    data = bytearray(p.read_bytes())
    data[36 + 3] = 200  # header is 36 bytes; corrupt the 4th label
    p.write_bytes(bytes(data))
    with pytest.raises(LabelOutOfRange) as ei:
        load_grid(p)
    assert ei.value.offset == 36 + 3
    assert ei.value.label == 200


def test_voxel_at_origin_corner():
    labels = np.zeros(8, dtype=np.uint8)
    labels[0] = 5
    grid = OccupancyGrid(dims=(2, 2, 2), voxel_size=0.5, origin=np.array([1.0, 2.0, 3.0]),
                         labels=labels)
    assert voxel_at(grid, [1.0, 2.0, 3.0]) == 5


def test_voxel_at_outside_is_empty():
    grid = OccupancyGrid(dims=(2, 2, 2), voxel_size=0.5, origin=np.zeros(3),
                         labels=np.full(8, 7, dtype=np.uint8))
    assert voxel_at(grid, [-0.01, 0.1, 0.1]) == 0
    assert voxel_at(grid, [1.0, 0.1, 0.1]) == 0  # max boundary counts as outside
    assert voxel_at(grid, [0.99, 0.99, 0.99]) == 7


def test_voxel_at_against_floor_division_oracle():
    rng = np.random.default_rng(42)
    grid = random_grid(rng, dims=(8, 8, 8), voxel_size=0.25,
                       origin=np.array([-1.0, 0.5, 2.0]), fill=0.4)
    nx, ny, nz = grid.dims
    pts = rng.uniform(-2.5, 4.5, size=(1000, 3))
    for p in pts:
        idx = np.floor((p - grid.origin) / grid.voxel_size).astype(int)
        if np.all(idx >= 0) and idx[0] < nx and idx[1] < ny and idx[2] < nz:
            expect = int(grid.labels[idx[0] + nx * (idx[1] + ny * idx[2])])
        else:
            expect = 0
        assert voxel_at(grid, p) == expect


@given(nx=st.integers(1, 6), ny=st.integers(1, 6), nz=st.integers(1, 6),
       seed=st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_roundtrip_property(tmp_path_factory, nx, ny, nz, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 19, size=nx * ny * nz).astype(np.uint8)
    grid = OccupancyGrid(dims=(nx, ny, nz), voxel_size=float(rng.uniform(0.05, 1.0)),
                         origin=rng.normal(size=3), labels=labels)
    p = tmp_path_factory.mktemp("occ") / "g.occ"
    save_grid(grid, p)
    loaded = load_grid(p)
    assert np.array_equal(loaded.labels, grid.labels)
    assert loaded.voxel_size == np.float32(grid.voxel_size)


def test_piecewise_constant_within_voxel():
    rng = np.random.default_rng(3)
    grid = random_grid(rng, dims=(4, 4, 4), voxel_size=0.3, fill=0.5)
    for _ in range(200):
        iv = rng.integers(0, 4, size=3)
        base = grid.origin + iv * grid.voxel_size
        a = base + rng.uniform(1e-6, grid.voxel_size - 1e-6, size=3)
        b = base + rng.uniform(1e-6, grid.voxel_size - 1e-6, size=3)
        assert voxel_at(grid, a) == voxel_at(grid, b)
