"""Grid, volume, displacement-field, and mask types plus elementary arithmetic.

Conventions used throughout the package:

* Arrays are indexed ``[x, y, z]``; the serialized linear order is x-fastest.
* Displacements are stored in voxel units.  The zero field is the identity
  transform: the output voxel at ``p`` samples the moving image at
  ``p + u(p)``.
* All stored data is finite; constructors reject NaN/Inf.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import NonFiniteDataError, check_same_grid, require_finite

# Voxel count must stay indexable with signed 32-bit offsets once flattened.
_MAX_VOXELS = 2**31 - 1

DEFAULT_LABEL_NAMES = {
    0: "background",
    1: "body",
    2: "lung",
    3: "liver",
    4: "kidney",
    5: "pancreas",
}


@dataclass(frozen=True)
class VolumeGrid:
    """Axis-aligned voxel lattice: dims in voxels, spacing/origin in mm."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("grid needs 3-component dims, spacing, and origin")
        if any(d < 1 for d in dims):
            raise ValueError(f"empty dimension in dims {dims}")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        if dims[0] * dims[1] * dims[2] > _MAX_VOXELS:
            raise ValueError(f"dims {dims} overflow the addressable voxel range")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        """Physical size covered by the voxel lattice."""
        return tuple(d * s for d, s in zip(self.dims, self.spacing))


def _own_array(data, dtype, shape, name: str) -> np.ndarray:
    arr = np.array(data, dtype=dtype, order="C")
    if arr.shape != shape:
        raise ValueError(f"{name} shape {arr.shape} does not match grid shape {shape}")
    require_finite(arr, name)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Volume3D:
    """Scalar intensity volume on a grid."""

    grid: VolumeGrid
    data: np.ndarray
    intensity_unit: str = "arbitrary"

    def __post_init__(self):
        arr = _own_array(self.data, np.float64, self.grid.dims, "volume data")
        object.__setattr__(self, "data", arr)

    def with_data(self, data: np.ndarray) -> "Volume3D":
        return Volume3D(self.grid, data, self.intensity_unit)


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel 3-vector displacement in voxel units; zero == identity."""

    grid: VolumeGrid
    vectors: np.ndarray

    def __post_init__(self):
        shape = self.grid.dims + (3,)
        arr = _own_array(self.vectors, np.float64, shape, "field vectors")
        object.__setattr__(self, "vectors", arr)

    def magnitudes(self) -> np.ndarray:
        return np.sqrt(np.sum(self.vectors**2, axis=-1))


@dataclass(frozen=True)
class LabelMask:
    """Integer organ labels on a grid, with a name for every label present."""

    grid: VolumeGrid
    labels: np.ndarray
    label_names: dict = field(default_factory=lambda: dict(DEFAULT_LABEL_NAMES))

    def __post_init__(self):
        arr = np.array(self.labels, dtype=np.int32, order="C")
        if arr.shape != self.grid.dims:
            raise ValueError(
                f"label shape {arr.shape} does not match grid dims {self.grid.dims}"
            )
        if arr.min(initial=0) < 0:
            raise ValueError("labels must be non-negative")
        present = set(int(v) for v in np.unique(arr))
        missing = present - set(self.label_names)
        if missing:
            raise ValueError(f"labels {sorted(missing)} present but unnamed")
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)
        object.__setattr__(self, "label_names", dict(self.label_names))

    def present_labels(self) -> list[int]:
        return [int(v) for v in np.unique(self.labels)]


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite objective: alpha (MI), lam (Dice), beta (bending)."""

    alpha: float = 1.0
    lam: float = 1.0
    beta: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.lam < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha + self.lam <= 0:
            raise ValueError("at least one data term (alpha or lam) must be active")


def make_volume(grid: VolumeGrid, fill: float = 0.0) -> Volume3D:
    """Constant-intensity volume."""
    if not np.isfinite(fill):
        raise NonFiniteDataError("fill value must be finite")
    return Volume3D(grid, np.full(grid.dims, float(fill)))


def zero_field(grid: VolumeGrid) -> DisplacementField:
    """The identity transform."""
    return DisplacementField(grid, np.zeros(grid.dims + (3,)))


def add_fields(a: DisplacementField, b: DisplacementField) -> DisplacementField:
    """Per-voxel vector sum.

    This is the additive combination of stage outputs (not functional warp
    composition): the total displacement is the plain sum of the components.
    """
    check_same_grid(a, b, "fields to add")
    return DisplacementField(a.grid, a.vectors + b.vectors)


def mask_to_binary(mask: LabelMask, labels) -> Volume3D:
    """Indicator volume: 1.0 where the voxel label is in ``labels``, else 0.0."""
    wanted = set(int(v) for v in labels)
    if not wanted:
        raise ValueError("label selection must be non-empty")
    known = set(mask.present_labels()) | set(mask.label_names)
    unknown = wanted - known
    if unknown:
        raise ValueError(
            f"unknown labels {sorted(unknown)}; known labels are {sorted(known)}"
        )
    indicator = np.isin(mask.labels, sorted(wanted)).astype(np.float64)
    return Volume3D(mask.grid, indicator)
