"""Semantic occupancy grid: the coarse scene-level prior.

Dense u8 label volume with a world placement. Storage is deliberately dense:
desk-scale grids fit in memory and dense indexing keeps ray traversal exact.
Cells are half-open: a point exactly on the max boundary is outside.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import BadMagic, LabelOutOfRange, TruncatedFile

OCC_MAGIC = b"OCCG"
OCC_VERSION = 1
_HEADER = struct.Struct("<4sIIIIf3f")  # magic | version | nx ny nz | voxel_size | origin


@dataclass(frozen=True)
class SemanticPalette:
    """Ordered label -> (RGB, name) table. Label 0 is always black "empty"."""

    entries: tuple  # of (id, (r, g, b), name)
    colors: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = [e[0] for e in self.entries]
        if ids != list(range(len(ids))):
            raise ValueError("palette ids must be unique and contiguous from 0")
        if tuple(self.entries[0][1]) != (0, 0, 0):
            raise ValueError("label 0 must map to (0,0,0) empty")
        colors = np.array([e[1] for e in self.entries], dtype=np.float64)
        object.__setattr__(self, "colors", colors)

    def __len__(self):
        return len(self.entries)

    def color01(self, labels) -> np.ndarray:
        """RGB in [0,1] for an array of labels."""
        return self.colors[np.asarray(labels)] / 255.0


def default_palette() -> SemanticPalette:
    data = resources.files("evsforge.assets").joinpath("default_palette.json").read_text()
    return _palette_from_json(json.loads(data))


def load_palette(path) -> SemanticPalette:
    return _palette_from_json(json.loads(Path(path).read_text()))


def _palette_from_json(items) -> SemanticPalette:
    entries = tuple((int(e["id"]), tuple(int(v) for v in e["rgb"]), str(e["name"])) for e in items)
    return SemanticPalette(entries)


@dataclass(frozen=True)
class OccupancyGrid:
    """Dense labeled voxel volume.

    labels is flat, length nx*ny*nz, row-major with x fastest:
    index = ix + nx * (iy + ny * iz). Label 0 means empty.
    """

    dims: tuple  # (nx, ny, nz)
    voxel_size: float
    origin: np.ndarray  # (3,) world position of the min corner, meters
    labels: np.ndarray  # (nx*ny*nz,) uint8

    def __post_init__(self):
        nx, ny, nz = self.dims
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if self.labels.shape != (nx * ny * nz,):
            raise ValueError(
                f"labels length {self.labels.shape} does not match dims {self.dims}"
            )
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        view = np.asarray(self.labels, dtype=np.uint8).view()
        view.setflags(write=False)
        object.__setattr__(self, "labels", view)

    @property
    def extent(self) -> np.ndarray:
        """World-space size of the grid, dims * voxel_size per axis."""
        return np.asarray(self.dims, dtype=np.float64) * self.voxel_size

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def label_volume(self) -> np.ndarray:
        """Read-only (nx, ny, nz) view of the flat label array."""
        nx, ny, nz = self.dims
        return self.labels.reshape(nz, ny, nx).transpose(2, 1, 0)

    def voxel_center(self, ix, iy, iz) -> np.ndarray:
        return self.origin + (np.array([ix, iy, iz], dtype=np.float64) + 0.5) * self.voxel_size

    def occupied_indices(self) -> np.ndarray:
        """(K, 3) integer indices of non-empty voxels, in flat-index order."""
        flat = np.flatnonzero(self.labels)
        nx, ny, nz = self.dims
        ix = flat % nx
        iy = (flat // nx) % ny
        iz = flat // (nx * ny)
        return np.stack([ix, iy, iz], axis=1)


def voxel_at(grid: OccupancyGrid, p) -> int:
    """Label at a world point; 0 (empty) outside the grid extent.

    The cell index is floor((p - origin) / voxel_size); cells are half-open so
    points on the max face fall outside.
    """
    p = np.asarray(p, dtype=np.float64)
    idx = np.floor((p - grid.origin) / grid.voxel_size).astype(np.int64)
    nx, ny, nz = grid.dims
    if np.any(idx < 0) or idx[0] >= nx or idx[1] >= ny or idx[2] >= nz:
        return 0
    return int(grid.labels[idx[0] + nx * (idx[1] + ny * idx[2])])


def save_grid(grid: OccupancyGrid, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    nx, ny, nz = grid.dims
    with open(tmp, "wb") as f:
        f.write(
            _HEADER.pack(OCC_MAGIC, OCC_VERSION, nx, ny, nz, grid.voxel_size, *grid.origin)
        )
        f.write(grid.labels.astype(np.uint8).tobytes())
    tmp.replace(path)


def load_grid(path, palette: SemanticPalette | None = None) -> OccupancyGrid:
    """Parse a .occ file; faults carry the byte offset where parsing failed."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4 or data[:4] != OCC_MAGIC:
        raise BadMagic(path, 0, bytes(data[:4]))
    if len(data) < _HEADER.size:
        raise TruncatedFile(path, len(data), _HEADER.size - len(data))
    _, version, nx, ny, nz, voxel_size, ox, oy, oz = _HEADER.unpack_from(data, 0)
    if version != OCC_VERSION:
        raise BadMagic(path, 4, data[4:8])
    n = nx * ny * nz
    if len(data) - _HEADER.size < n:
        raise TruncatedFile(path, len(data), n - (len(data) - _HEADER.size))
    labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=_HEADER.size).copy()
    palette = palette or default_palette()
    bad = np.flatnonzero(labels >= len(palette))
    if bad.size:
        i = int(bad[0])
        raise LabelOutOfRange(path, _HEADER.size + i, int(labels[i]), len(palette))
    return OccupancyGrid(
        dims=(nx, ny, nz),
        voxel_size=voxel_size,
        origin=np.array([ox, oy, oz], dtype=np.float64),
        labels=labels,
    )
