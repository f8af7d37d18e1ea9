"""Voxel grids and the three kinds of image data that live on them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor

NUM_LABELS = 4
BACKGROUND, LVBP, LVM, RV = 0, 1, 2, 3
LABEL_NAMES = {BACKGROUND: "background", LVBP: "LVBP", LVM: "LVM", RV: "RV"}
# order of sub-fields in the composition: LVBP, LVM, RV, background
REGION_ORDER = (LVBP, LVM, RV, BACKGROUND)

ROLES = ("velocity", "displacement", "deformation")


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    extents: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        ext = tuple(int(n) for n in self.extents)
        sp = tuple(float(s) for s in self.spacing)
        if len(ext) != 3 or len(sp) != 3:
            raise ValueError("Grid needs three extents and three spacings")
        if min(ext) < 2:
            raise ValueError(f"Grid extents must be >= 2 per axis, got {ext}")
        if not all(s > 0 and np.isfinite(s) for s in sp):
            raise ValueError(f"Grid spacing must be positive, got {sp}")
        object.__setattr__(self, "extents", ext)
        object.__setattr__(self, "spacing", sp)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.extents

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.extents))

    @property
    def voxel_volume(self) -> float:
        """mm^3 per voxel."""
        return float(np.prod(self.spacing))

    def identity(self) -> np.ndarray:
        """Voxel coordinates of every grid point, shape (3, W, H, D)."""
        return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in self.extents], indexing="ij"))

    def same_shape(self, other: "Grid") -> bool:
        return self.extents == other.extents


def check_grids(*grids: Grid) -> Grid:
    first = grids[0]
    for g in grids[1:]:
        if g.extents != first.extents:
            raise GridMismatchError(f"grid mismatch: {first.extents} vs {g.extents}")
    return first


class Volume:
    """Scalar image on a grid. ``data`` is a Tensor of shape ``grid.extents``."""

    def __init__(self, grid: Grid, data):
        data = as_tensor(data)
        if data.shape != grid.extents:
            raise GridMismatchError(f"volume data {data.shape} does not match grid {grid.extents}")
        self.grid = grid
        self.data = data

    @property
    def array(self) -> np.ndarray:
        return self.data.data

    def __repr__(self) -> str:
        return f"Volume(extents={self.grid.extents}, spacing={self.grid.spacing})"


class LabelMap:
    """Hard partition of the grid into background, LVBP, LVM and RV."""

    def __init__(self, grid: Grid, labels):
        labels = np.asarray(labels)
        if labels.shape != grid.extents:
            raise GridMismatchError(f"label data {labels.shape} does not match grid {grid.extents}")
        if labels.dtype.kind == "f":
            if not np.all(np.isfinite(labels)) or np.any(labels != np.round(labels)):
                raise ValueError("label map contains non-integer values")
        labels = labels.astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= NUM_LABELS):
            bad = np.unique(labels[(labels < 0) | (labels >= NUM_LABELS)])
            raise ValueError(f"label values must be in 0..{NUM_LABELS - 1}, found {bad.tolist()}")
        self.grid = grid
        self.labels = labels

    def one_hot(self) -> np.ndarray:
        """(4, W, H, D) float array, channel k is ``labels == k``."""
        return (self.labels[None] == np.arange(NUM_LABELS).reshape(-1, 1, 1, 1)).astype(np.float64)

    def count(self, label: int) -> int:
        return int(np.count_nonzero(self.labels == label))

    def __repr__(self) -> str:
        return f"LabelMap(extents={self.grid.extents})"


class VectorField:
    """Three-component field in voxel units, data shape (3, W, H, D)."""

    def __init__(self, grid: Grid, data, role: str):
        if role not in ROLES:
            raise ValueError(f"unknown field role {role!r}; expected one of {ROLES}")
        data = as_tensor(data)
        if data.shape != (3, *grid.extents):
            raise GridMismatchError(f"field data {data.shape} does not match grid (3, {grid.extents})")
        self.grid = grid
        self.data = data
        self.role = role

    @classmethod
    def identity(cls, grid: Grid) -> "VectorField":
        return cls(grid, grid.identity(), "deformation")

    @property
    def array(self) -> np.ndarray:
        return self.data.data

    def displacement(self) -> "VectorField":
        """u = phi - id for a deformation."""
        if self.role != "deformation":
            raise ValueError(f"displacement() needs a deformation field, got {self.role}")
        return VectorField(self.grid, self.data - Tensor(self.grid.identity()), "displacement")

    def to_deformation(self) -> "VectorField":
        """phi = id + u for a displacement."""
        if self.role != "displacement":
            raise ValueError(f"to_deformation() needs a displacement field, got {self.role}")
        return VectorField(self.grid, Tensor(self.grid.identity()) + self.data, "deformation")

    def __repr__(self) -> str:
        return f"VectorField(role={self.role}, extents={self.grid.extents})"
