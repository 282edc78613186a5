"""Synthetic whole-body phantom pairs with exact ground-truth deformations.

The anatomy (body ellipsoid, two lungs, liver, two kidneys, an elongated
pancreas) is an analytic function of position: soft-edged intensity bands
plus a smooth sinusoidal texture and a smoothed noise layer, all evaluable
at arbitrary continuous coordinates.  The moving image renders the anatomy
on the lattice; the fixed image renders it at ``T(p) = A p + t + u(p)``
(a jittered or exact affine plus a Gaussian-smoothed random field), so the
stored ``true_field`` ``T(p) - p`` reproduces the fixed image from the
moving image up to interpolation error.  The fixed mask is the moving-mask
label at ``round(T(p))`` — exactly what nearest-neighbor warping with the
true field produces, making the ground-truth field's mask Dice 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from .grid import DEFAULT_LABEL_NAMES, DisplacementField, LabelMask, Volume3D, VolumeGrid
from .warp import AffineParams, index_grid, sample_nearest, sample_trilinear

_EDGE_WIDTH = 0.6  # sigmoid softness scale, voxels
_FIT_BUDGET = 0.97  # organ center radius + size ratio must stay below this
_NOISE_STD = 0.02
_TEXTURE_AMPLITUDE = 0.05


@dataclass(frozen=True)
class AffineJitter:
    """Uniform ranges for the random affine component of a phantom pair."""

    translation_voxels: float = 2.0
    rotation_degrees: float = 3.0
    scale_fraction: float = 0.03

    def __post_init__(self):
        if min(self.translation_voxels, self.rotation_degrees, self.scale_fraction) < 0:
            raise ValueError("jitter ranges must be >= 0")


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (64, 48, 40)
    seed: int = 0
    deform_max_voxels: float = 4.0
    deform_smoothness_sigma: float = 6.0
    affine_jitter: AffineJitter = AffineJitter()
    exact_affine: AffineParams | None = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 16:
            raise ValueError(f"phantom dims must be 3 values >= 16, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        if self.deform_max_voxels < 0:
            raise ValueError("deform_max_voxels must be >= 0")
        if self.deform_smoothness_sigma <= 0:
            raise ValueError("deform_smoothness_sigma must be positive")


@dataclass(frozen=True)
class PhantomPair:
    fixed: Volume3D
    moving: Volume3D
    fixed_mask: LabelMask
    moving_mask: LabelMask
    true_field: DisplacementField
    true_affine: AffineParams


@dataclass(frozen=True)
class _Shape:
    label: int
    center_rel: tuple
    radii_rel: tuple
    radii_min: tuple
    band_delta: float  # intensity change against the surrounding tissue

    def geometry(self, dims):
        span = np.array(dims, dtype=float) - 1.0
        center = np.array(self.center_rel) * span
        radii = np.maximum(np.array(self.radii_rel) * span, np.array(self.radii_min))
        return center, radii

    def radius_map(self, pos, dims):
        center, radii = self.geometry(dims)
        return np.sqrt(np.sum(((pos - center) / radii) ** 2, axis=-1))

    def soft(self, pos, dims):
        center, radii = self.geometry(dims)
        rho = np.sqrt(np.sum(((pos - center) / radii) ** 2, axis=-1))
        r_ref = float(np.prod(radii) ** (1.0 / 3.0))
        return expit((1.0 - rho) * r_ref / _EDGE_WIDTH)


# Painter's order: later shapes overwrite earlier labels where they overlap.
_SHAPES = (
    _Shape(1, (0.50, 0.50, 0.50), (0.42, 0.40, 0.42), (5.0, 5.0, 5.0), 0.55),
    _Shape(2, (0.35, 0.42, 0.68), (0.12, 0.13, 0.14), (3.2, 3.2, 3.5), -0.40),
    _Shape(2, (0.65, 0.42, 0.68), (0.12, 0.13, 0.14), (3.2, 3.2, 3.5), -0.40),
    _Shape(3, (0.34, 0.55, 0.40), (0.17, 0.15, 0.13), (4.2, 3.8, 3.2), 0.10),
    _Shape(4, (0.36, 0.68, 0.30), (0.07, 0.07, 0.09), (2.0, 2.0, 2.4), 0.20),
    _Shape(4, (0.64, 0.68, 0.30), (0.07, 0.07, 0.09), (2.0, 2.0, 2.4), 0.20),
    _Shape(5, (0.55, 0.40, 0.33), (0.16, 0.05, 0.04), (4.0, 1.6, 1.5), 0.30),
)


def _check_fit(dims):
    body = _SHAPES[0]
    body_center, body_radii = body.geometry(dims)
    margin = 2.0
    for axis in range(3):
        lo = body_center[axis] - body_radii[axis] - margin
        hi = body_center[axis] + body_radii[axis] + margin
        if lo < 0 or hi > dims[axis] - 1:
            raise ValueError(
                f"phantom organs do not fit in dims {dims} "
                f"(body overflows axis {axis}); use larger dims"
            )
    for shape in _SHAPES[1:]:
        center, radii = shape.geometry(dims)
        rho = float(np.sqrt(np.sum(((center - body_center) / body_radii) ** 2)))
        if rho + float(np.max(radii / body_radii)) > _FIT_BUDGET:
            raise ValueError(
                f"phantom organs do not fit in dims {dims} "
                f"(label {shape.label} overflows the body); use larger dims"
            )


def _render_intensity(pos, dims, noise_grid):
    body_soft = _SHAPES[0].soft(pos, dims)
    image = _SHAPES[0].band_delta * body_soft
    for shape in _SHAPES[1:]:
        image = image + shape.band_delta * shape.soft(pos, dims)
    texture = (
        _TEXTURE_AMPLITUDE
        * np.sin(0.55 * pos[..., 0] + 1.3)
        * np.sin(0.45 * pos[..., 1] + 0.7)
        * np.sin(0.50 * pos[..., 2] + 2.1)
    )
    noise = sample_trilinear(noise_grid, pos, padding="border")
    return image + (texture + noise) * body_soft


def _render_labels(pos, dims):
    labels = np.zeros(pos.shape[:-1], dtype=np.int32)
    for shape in _SHAPES:
        labels[shape.radius_map(pos, dims) < 1.0] = shape.label
    return labels


def _draw_affine(spec: PhantomSpec, rng, dims) -> AffineParams:
    if spec.exact_affine is not None:
        return spec.exact_affine
    jitter = spec.affine_jitter
    shift = rng.uniform(-jitter.translation_voxels, jitter.translation_voxels, 3)
    angles = np.radians(
        rng.uniform(-jitter.rotation_degrees, jitter.rotation_degrees, 3)
    )
    scale = 1.0 + rng.uniform(-jitter.scale_fraction, jitter.scale_fraction)
    cx, sx = np.cos(angles[0]), np.sin(angles[0])
    cy, sy = np.cos(angles[1]), np.sin(angles[1])
    cz, sz = np.cos(angles[2]), np.sin(angles[2])
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    a = rz @ ry @ rx * scale
    center = (np.array(dims, dtype=float) - 1.0) / 2.0
    return AffineParams.from_parts(a, center - a @ center + shift)


def _draw_deformation(spec: PhantomSpec, rng):
    if spec.deform_max_voxels == 0:
        return np.zeros(spec.dims + (3,))
    raw = rng.standard_normal(spec.dims + (3,))
    smooth = np.stack(
        [gaussian_filter(raw[..., c], spec.deform_smoothness_sigma) for c in range(3)],
        axis=-1,
    )
    peak = float(np.sqrt(np.sum(smooth**2, axis=-1)).max())
    return smooth * (spec.deform_max_voxels / peak)


def generate_phantom(spec: PhantomSpec = PhantomSpec()) -> PhantomPair:
    """Deterministically build a fixed/moving pair with known deformation."""
    _check_fit(spec.dims)
    rng = np.random.default_rng(spec.seed)
    noise_grid = gaussian_filter(rng.standard_normal(spec.dims), 2.0)
    std = float(noise_grid.std())
    if std > 0:
        noise_grid *= _NOISE_STD / std
    affine = _draw_affine(spec, rng, spec.dims)
    deformation = _draw_deformation(spec, rng)

    lattice = index_grid(spec.dims)
    targets = affine.apply(lattice) + deformation

    grid = VolumeGrid(dims=spec.dims, spacing=(1.0, 1.0, 1.0))
    moving_data = _render_intensity(lattice, spec.dims, noise_grid)
    fixed_data = _render_intensity(targets, spec.dims, noise_grid)
    moving_labels = _render_labels(lattice, spec.dims)
    fixed_labels = sample_nearest(
        moving_labels.astype(np.float64), targets, padding="zeros"
    ).astype(np.int32)

    return PhantomPair(
        fixed=Volume3D(grid, fixed_data, intensity_unit="normalized"),
        moving=Volume3D(grid, moving_data, intensity_unit="normalized"),
        fixed_mask=LabelMask(grid, fixed_labels, label_names=DEFAULT_LABEL_NAMES),
        moving_mask=LabelMask(grid, moving_labels, label_names=DEFAULT_LABEL_NAMES),
        true_field=DisplacementField(grid, targets - lattice),
        true_affine=affine,
    )
