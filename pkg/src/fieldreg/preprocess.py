"""Volume preprocessing: intensity normalization, body cropping, resampling.

The standard chain (``apply_chain``) runs normalize -> crop-to-body ->
resample-to-target on a volume/body-mask pair.  Orientation normalization
and slope/intercept intensity rescale happen earlier, at file-reading time.
Resampling preserves the physical extent: target spacing is
``extent / target_dims`` and sample positions map voxel centers to voxel
centers, so resampling to the same dims is the identity.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .grid import LabelMask, Volume3D, VolumeGrid
from .warp import index_grid, sample_trilinear


@dataclass(frozen=True)
class PreprocessSpec:
    """Chain settings.

    ``normalize`` is "minmax_01" or a ("window", lo, hi) triple; windowing
    clamps to [lo, hi] before mapping to [0, 1].
    """

    target_dims: tuple = (256, 192, 160)
    normalize: object = "minmax_01"
    crop_margin_voxels: int = 2

    def __post_init__(self):
        dims = tuple(int(d) for d in self.target_dims)
        if len(dims) != 3 or min(dims) < 8:
            raise ValueError(f"target dims must be 3 values >= 8, got {self.target_dims}")
        object.__setattr__(self, "target_dims", dims)
        if self.normalize != "minmax_01":
            tag, lo, hi = self.normalize
            if tag != "window" or not hi > lo:
                raise ValueError(f"bad normalize setting {self.normalize!r}")
            object.__setattr__(self, "normalize", ("window", float(lo), float(hi)))
        if self.crop_margin_voxels < 0:
            raise ValueError("crop margin must be >= 0")


def crop_to_body(vol: Volume3D, body: LabelMask, margin: int = 2):
    """Crop to the bounding box of all positive body-mask labels, dilated by
    ``margin`` voxels and clamped to the volume; returns (volume, crop_box)
    with the box as ((x0, x1), (y0, y1), (z0, z1)), half-open."""
    if vol.grid != body.grid:
        raise ValueError("volume and body mask live on different grids")
    support = body.labels > 0
    if not support.any():
        raise ValueError("body mask is empty; nothing to crop to")
    box = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        present = np.flatnonzero(support.any(axis=other))
        lo = max(0, int(present[0]) - margin)
        hi = min(vol.grid.dims[axis], int(present[-1]) + 1 + margin)
        box.append((lo, hi))
    box = tuple(box)
    return apply_crop(vol, box), box


def apply_crop(obj, box):
    """Apply a crop box from ``crop_to_body`` to a Volume3D or LabelMask."""
    slices = tuple(slice(lo, hi) for lo, hi in box)
    grid = obj.grid
    new_grid = VolumeGrid(
        dims=tuple(hi - lo for lo, hi in box),
        spacing=grid.spacing,
        origin=tuple(
            o + s * lo for o, s, (lo, _) in zip(grid.origin, grid.spacing, box)
        ),
    )
    if isinstance(obj, LabelMask):
        return LabelMask(new_grid, obj.labels[slices], label_names=obj.label_names)
    return Volume3D(new_grid, obj.data[slices], intensity_unit=obj.intensity_unit)


def _resample_geometry(grid: VolumeGrid, target_dims):
    target_dims = tuple(int(d) for d in target_dims)
    if min(target_dims) < 1:
        raise ValueError(f"bad target dims {target_dims}")
    ratio = np.array(grid.dims, dtype=float) / np.array(target_dims, dtype=float)
    pos = (index_grid(target_dims) + 0.5) * ratio - 0.5
    spacing = tuple(s * r for s, r in zip(grid.spacing, ratio))
    origin = tuple(o + s * (r - 1.0) / 2.0 for o, s, r in zip(grid.origin, grid.spacing, ratio))
    return VolumeGrid(target_dims, spacing, origin), pos


def resample_to(vol: Volume3D, target_dims) -> Volume3D:
    """Trilinear resample to exactly ``target_dims``, preserving extent."""
    new_grid, pos = _resample_geometry(vol.grid, target_dims)
    if new_grid.dims == vol.grid.dims:
        return Volume3D(new_grid, vol.data, intensity_unit=vol.intensity_unit)
    data = sample_trilinear(vol.data, pos, padding="border")
    return Volume3D(new_grid, data, intensity_unit=vol.intensity_unit)


def resample_mask_to(mask: LabelMask, target_dims) -> LabelMask:
    """Nearest-neighbor resample of a label mask to ``target_dims``."""
    new_grid, pos = _resample_geometry(mask.grid, target_dims)
    if new_grid.dims == mask.grid.dims:
        return LabelMask(new_grid, mask.labels, label_names=mask.label_names)
    idx = np.floor(pos + 0.5).astype(np.int64)
    for axis in range(3):
        np.clip(idx[..., axis], 0, mask.grid.dims[axis] - 1, out=idx[..., axis])
    labels = mask.labels[idx[..., 0], idx[..., 1], idx[..., 2]]
    return LabelMask(new_grid, labels, label_names=mask.label_names)


def normalize_intensity(vol: Volume3D, normalize="minmax_01") -> Volume3D:
    """Map intensities to [0, 1].

    "minmax_01" maps the data span; a constant volume becomes all 0.5 (with
    a warning).  ("window", lo, hi) clamps to the window first.
    """
    data = vol.data
    if normalize == "minmax_01":
        lo, hi = float(data.min()), float(data.max())
        if hi <= lo:
            warnings.warn("constant volume under minmax normalization; mapping to 0.5",
                          stacklevel=2)
            out = np.full_like(data, 0.5)
        else:
            out = (data - lo) / (hi - lo)
    else:
        tag, lo, hi = normalize
        if tag != "window" or not hi > lo:
            raise ValueError(f"bad normalize setting {normalize!r}")
        out = (np.clip(data, lo, hi) - lo) / (hi - lo)
    return Volume3D(vol.grid, out, intensity_unit="normalized")


def apply_chain(vol: Volume3D, body: LabelMask, spec: PreprocessSpec = PreprocessSpec()):
    """normalize -> crop-to-body -> resample; returns (volume, mask, info).

    The body mask goes through the same crop and a nearest-neighbor
    resample so it stays aligned with the volume.
    """
    normalized = normalize_intensity(vol, spec.normalize)
    cropped, box = crop_to_body(normalized, body, spec.crop_margin_voxels)
    mask_cropped = apply_crop(body, box)
    out_vol = resample_to(cropped, spec.target_dims)
    out_mask = resample_mask_to(mask_cropped, spec.target_dims)
    info = {
        "input_dims": vol.grid.dims,
        "crop_box": box,
        "output_dims": out_vol.grid.dims,
        "normalize": spec.normalize,
        "crop_margin_voxels": spec.crop_margin_voxels,
    }
    return out_vol, out_mask, info
