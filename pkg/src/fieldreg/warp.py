"""Backward warping, affine fields, and resolution-pyramid resampling.

Warping is pull-based: the output voxel at integer position ``p`` samples the
moving image at ``p + u(p)``.  Intensities use trilinear interpolation, label
masks nearest-neighbor.  The spatial derivative of the trilinear interpolant
(needed by the loss gradients) is exact almost everywhere; exactly on lattice
planes, where the interpolant has a kink, the two one-sided derivatives are
averaged so the derivative is symmetric under mirroring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import DisplacementField, LabelMask, Volume3D, VolumeGrid
from .validation import check_same_grid, require_finite

_IDENTITY_M = (1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0)


@dataclass(frozen=True)
class AffineParams:
    """12 scalars, row-major [A | t], acting on voxel coordinates x' = A x + t."""

    m: tuple = _IDENTITY_M

    def __post_init__(self):
        m = tuple(float(v) for v in self.m)
        if len(m) != 12:
            raise ValueError(f"affine needs 12 parameters, got {len(m)}")
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls()

    @classmethod
    def from_parts(cls, a: np.ndarray, t: np.ndarray) -> "AffineParams":
        a = np.asarray(a, dtype=float).reshape(3, 3)
        t = np.asarray(t, dtype=float).reshape(3)
        return cls(tuple(np.hstack([a, t[:, None]]).ravel()))

    @property
    def a(self) -> np.ndarray:
        return np.array(self.m, dtype=float).reshape(3, 4)[:, :3]

    @property
    def t(self) -> np.ndarray:
        return np.array(self.m, dtype=float).reshape(3, 4)[:, 3]

    def det(self) -> float:
        return float(np.linalg.det(self.a))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map voxel coordinates (…, 3) through x' = A x + t."""
        return points @ self.a.T + self.t


@dataclass(frozen=True)
class InterpSpec:
    mode: str = "trilinear"  # trilinear | nearest
    padding: str = "zeros"  # zeros | border

    def __post_init__(self):
        if self.mode not in ("trilinear", "nearest"):
            raise ValueError(f"unknown interpolation mode {self.mode!r}")
        if self.padding not in ("zeros", "border"):
            raise ValueError(f"unknown padding mode {self.padding!r}")


_grid_cache: dict = {}


def index_grid(dims) -> np.ndarray:
    """Float voxel-index grid of shape dims + (3,); cached read-only."""
    dims = tuple(int(d) for d in dims)
    cached = _grid_cache.get(dims)
    if cached is None:
        axes = [np.arange(n, dtype=np.float64) for n in dims]
        cached = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        cached.setflags(write=False)
        if len(_grid_cache) > 16:
            _grid_cache.clear()
        _grid_cache[dims] = cached
    return cached


def _gather(data: np.ndarray, ix, iy, iz, padding: str) -> np.ndarray:
    nx, ny, nz = data.shape
    if padding == "border":
        return data[
            np.clip(ix, 0, nx - 1), np.clip(iy, 0, ny - 1), np.clip(iz, 0, nz - 1)
        ]
    valid = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny) & (iz >= 0) & (iz < nz)
    vals = data[
        np.clip(ix, 0, nx - 1), np.clip(iy, 0, ny - 1), np.clip(iz, 0, nz - 1)
    ]
    return np.where(valid, vals, 0.0)


def sample_trilinear(
    data: np.ndarray, pos: np.ndarray, padding: str = "zeros", with_grad: bool = False
):
    """Trilinear sample of ``data`` at voxel coordinates ``pos`` (…, 3).

    With ``with_grad`` also returns the spatial derivative of the interpolant,
    shape pos.shape; on lattice planes the left/right one-sided derivatives
    are averaged.
    """
    x, y, z = pos[..., 0], pos[..., 1], pos[..., 2]
    x0f, y0f, z0f = np.floor(x), np.floor(y), np.floor(z)
    fx, fy, fz = x - x0f, y - y0f, z - z0f
    x0, y0, z0 = x0f.astype(np.int64), y0f.astype(np.int64), z0f.astype(np.int64)

    corners = {}
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corners[dx, dy, dz] = _gather(data, x0 + dx, y0 + dy, z0 + dz, padding)

    wx = (1.0 - fx, fx)
    wy = (1.0 - fy, fy)
    wz = (1.0 - fz, fz)

    value = np.zeros_like(x)
    for (dx, dy, dz), v in corners.items():
        value = value + wx[dx] * wy[dy] * wz[dz] * v
    if not with_grad:
        return value

    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    gz = np.zeros_like(x)
    for dy in (0, 1):
        for dz in (0, 1):
            gx += wy[dy] * wz[dz] * (corners[1, dy, dz] - corners[0, dy, dz])
    for dx in (0, 1):
        for dz in (0, 1):
            gy += wx[dx] * wz[dz] * (corners[dx, 1, dz] - corners[dx, 0, dz])
    for dx in (0, 1):
        for dy in (0, 1):
            gz += wx[dx] * wy[dy] * (corners[dx, dy, 1] - corners[dx, dy, 0])

    # Symmetrize where the position sits exactly on a lattice plane: average
    # the one-sided derivatives so mirrored configurations cancel exactly.
    for axis, (frac, g, i0s) in enumerate(
        ((fx, gx, (x0, y0, z0)), (fy, gy, (x0, y0, z0)), (fz, gz, (x0, y0, z0)))
    ):
        on = frac == 0.0
        if not np.any(on):
            continue
        x0a, y0a, z0a = i0s
        g_minus = np.zeros_like(x)
        for db in (0, 1):
            for dc in (0, 1):
                if axis == 0:
                    hi = _gather(data, x0a, y0a + db, z0a + dc, padding)
                    lo = _gather(data, x0a - 1, y0a + db, z0a + dc, padding)
                    w = wy[db] * wz[dc]
                elif axis == 1:
                    hi = _gather(data, x0a + db, y0a, z0a + dc, padding)
                    lo = _gather(data, x0a + db, y0a - 1, z0a + dc, padding)
                    w = wx[db] * wz[dc]
                else:
                    hi = _gather(data, x0a + db, y0a + dc, z0a, padding)
                    lo = _gather(data, x0a + db, y0a + dc, z0a - 1, padding)
                    w = wx[db] * wy[dc]
                g_minus += w * (hi - lo)
        g[...] = np.where(on, 0.5 * (g + g_minus), g)

    grad = np.stack([gx, gy, gz], axis=-1)
    return value, grad


def sample_nearest(data: np.ndarray, pos: np.ndarray, padding: str = "zeros"):
    """Nearest-neighbor sample; ties at .5 round up (floor(p + 0.5))."""
    idx = np.floor(pos + 0.5).astype(np.int64)
    return _gather(data, idx[..., 0], idx[..., 1], idx[..., 2], padding)


def warp_volume(
    moving: Volume3D, field: DisplacementField, spec: InterpSpec = InterpSpec()
) -> Volume3D:
    """Resample ``moving`` through the displacement field (pull-based)."""
    check_same_grid(moving, field, "moving volume and field")
    require_finite(field.vectors, "displacement field")
    pos = index_grid(moving.grid.dims) + field.vectors
    if spec.mode == "nearest":
        data = sample_nearest(moving.data, pos, spec.padding)
    else:
        data = sample_trilinear(moving.data, pos, spec.padding)
    return Volume3D(moving.grid, data, moving.intensity_unit)


def warp_mask(mask: LabelMask, field: DisplacementField) -> LabelMask:
    """Nearest-neighbor warp of a label mask; out-of-range voxels become 0."""
    check_same_grid(mask, field, "mask and field")
    pos = index_grid(mask.grid.dims) + field.vectors
    labels = sample_nearest(mask.labels.astype(np.float64), pos, "zeros")
    names = dict(mask.label_names)
    names.setdefault(0, "background")
    return LabelMask(mask.grid, labels.astype(np.int32), names)


def affine_to_field(params: AffineParams, grid: VolumeGrid) -> DisplacementField:
    """Dense realization: field(p) = (A p + t) - p for every voxel p."""
    pts = index_grid(grid.dims)
    return DisplacementField(grid, params.apply(pts) - pts)


def downsample(vol: Volume3D, factor: int) -> Volume3D:
    """Block-mean pooling by an integer factor; trailing remainder truncated."""
    if factor < 2:
        raise ValueError("downsample factor must be >= 2")
    nx, ny, nz = vol.grid.dims
    ox, oy, oz = nx // factor, ny // factor, nz // factor
    if min(ox, oy, oz) < 1:
        raise ValueError(f"factor {factor} empties dims {vol.grid.dims}")
    block = vol.data[: ox * factor, : oy * factor, : oz * factor].reshape(
        ox, factor, oy, factor, oz, factor
    )
    pooled = block.mean(axis=(1, 3, 5))
    grid = VolumeGrid(
        (ox, oy, oz),
        tuple(s * factor for s in vol.grid.spacing),
        tuple(
            o + s * (factor - 1) / 2.0 for o, s in zip(vol.grid.origin, vol.grid.spacing)
        ),
    )
    return Volume3D(grid, pooled, vol.intensity_unit)


def downsample_field(field: DisplacementField, factor: int) -> DisplacementField:
    """Restrict a field to a coarser grid: block-mean vectors, rescaled to
    coarse voxel units (divided by the factor)."""
    comps = [
        downsample(Volume3D(field.grid, field.vectors[..., c]), factor).data / factor
        for c in range(3)
    ]
    grid = downsample(Volume3D(field.grid, field.vectors[..., 0]), factor).grid
    return DisplacementField(grid, np.stack(comps, axis=-1))


def downsample_mask(mask: LabelMask, factor: int) -> LabelMask:
    """Restrict a mask by sampling the center voxel of each pooling block."""
    if factor < 2:
        raise ValueError("downsample factor must be >= 2")
    nx, ny, nz = mask.grid.dims
    ox, oy, oz = nx // factor, ny // factor, nz // factor
    if min(ox, oy, oz) < 1:
        raise ValueError(f"factor {factor} empties dims {mask.grid.dims}")
    c = (factor - 1) // 2
    labels = mask.labels[
        c : ox * factor : factor, c : oy * factor : factor, c : oz * factor : factor
    ]
    grid = VolumeGrid(
        (ox, oy, oz),
        tuple(s * factor for s in mask.grid.spacing),
        tuple(
            o + s * (factor - 1) / 2.0
            for o, s in zip(mask.grid.origin, mask.grid.spacing)
        ),
    )
    return LabelMask(grid, labels, mask.label_names)


def upsample_field(field: DisplacementField, target: VolumeGrid) -> DisplacementField:
    """Prolong a field to a finer grid.

    Each component is trilinearly interpolated (voxel-center convention,
    border clamp) and rescaled by the per-axis dimension ratio so the vectors
    stay in target voxel units.
    """
    src_dims = field.grid.dims
    if any(t < s for t, s in zip(target.dims, src_dims)):
        raise ValueError(f"target dims {target.dims} smaller than source {src_dims}")
    ratio = np.array([t / s for t, s in zip(target.dims, src_dims)])
    pts = index_grid(target.dims)
    src_pos = (pts + 0.5) / ratio - 0.5
    out = np.empty(target.dims + (3,))
    for c in range(3):
        out[..., c] = ratio[c] * sample_trilinear(
            field.vectors[..., c], src_pos, padding="border"
        )
    return DisplacementField(target, out)
