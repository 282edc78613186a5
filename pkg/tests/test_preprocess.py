"""Cropping, resampling, and intensity normalization."""

import numpy as np
import pytest
from scipy import ndimage

from fieldreg import (
    LabelMask,
    PhantomSpec,
    PreprocessSpec,
    Volume3D,
    VolumeGrid,
    apply_chain,
    apply_crop,
    crop_to_body,
    generate_phantom,
    normalize_intensity,
    resample_mask_to,
    resample_to,
)


def _vol(dims, data=None, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    grid = VolumeGrid(dims, spacing, origin)
    if data is None:
        data = np.random.default_rng(0).normal(size=dims)
    return Volume3D(grid, data)


def _body(dims, support):
    return LabelMask(VolumeGrid(dims), support.astype(np.int32))


# ---------------------------------------------------------------------------
# crop_to_body


def test_crop_is_noop_when_body_covers_everything():
    dims = (9, 7, 8)
    vol = _vol(dims)
    cropped, box = crop_to_body(vol, _body(dims, np.ones(dims)), margin=2)
    assert box == ((0, 9), (0, 7), (0, 8))
    assert cropped.grid == vol.grid
    assert np.array_equal(cropped.data, vol.data)


def test_crop_single_voxel_with_margin_two_gives_five_cubed():
    dims = (11, 11, 11)
    support = np.zeros(dims)
    support[5, 5, 5] = 1
    vol = _vol(dims, spacing=(1.5, 1.0, 2.0))
    body = LabelMask(vol.grid, support.astype(np.int32))
    cropped, box = crop_to_body(vol, body, margin=2)
    assert box == ((3, 8), (3, 8), (3, 8))
    assert cropped.grid.dims == (5, 5, 5)
    # origin advances by the crop offset expressed in physical units
    assert cropped.grid.origin == (4.5, 3.0, 6.0)
    assert np.array_equal(cropped.data, vol.data[3:8, 3:8, 3:8])


def test_crop_box_matches_exhaustive_scan_oracle():
    dims = (14, 11, 9)
    rng = np.random.default_rng(3)
    support = rng.random(dims) > 0.97
    support[0, 0, 0] = True  # force contact with one corner to exercise clamping
    margin = 1
    vol = _vol(dims)
    _, box = crop_to_body(vol, _body(dims, support), margin=margin)
    voxels = np.argwhere(support)
    for axis in range(3):
        lo = max(0, int(voxels[:, axis].min()) - margin)
        hi = min(dims[axis], int(voxels[:, axis].max()) + 1 + margin)
        assert box[axis] == (lo, hi)


def test_crop_empty_body_raises():
    dims = (8, 8, 8)
    with pytest.raises(ValueError, match="body mask is empty"):
        crop_to_body(_vol(dims), _body(dims, np.zeros(dims)), margin=2)


def test_crop_grid_mismatch_raises():
    with pytest.raises(ValueError, match="different grids"):
        crop_to_body(_vol((8, 8, 8)), _body((9, 8, 8), np.ones((9, 8, 8))), margin=0)


def test_apply_crop_on_mask_keeps_names():
    dims = (8, 8, 8)
    labels = np.zeros(dims, dtype=np.int32)
    labels[2:6, 2:6, 2:6] = 3
    mask = LabelMask(VolumeGrid(dims), labels, label_names={0: "background", 3: "liver"})
    out = apply_crop(mask, ((2, 6), (2, 6), (2, 6)))
    assert out.grid.dims == (4, 4, 4)
    assert np.all(out.labels == 3)
    assert out.label_names[3] == "liver"


# ---------------------------------------------------------------------------
# resample_to


def test_resample_same_dims_is_identity():
    vol = _vol((10, 9, 8), spacing=(1.5, 1.0, 2.0), origin=(3.0, -1.0, 0.5))
    out = resample_to(vol, (10, 9, 8))
    assert out.grid == vol.grid
    assert np.allclose(out.data, vol.data, atol=1e-6)


def test_resample_dims_exact_and_extent_preserved():
    vol = _vol((16, 16, 16), spacing=(1.25, 1.0, 0.75))
    out = resample_to(vol, (32, 24, 20))
    assert out.grid.dims == (32, 24, 20)
    for axis in range(3):
        old_extent = vol.grid.dims[axis] * vol.grid.spacing[axis]
        new_extent = out.grid.dims[axis] * out.grid.spacing[axis]
        assert abs(old_extent - new_extent) < 1e-6
        # the center of the sampled extent stays put
        old_center = vol.grid.origin[axis] + vol.grid.spacing[axis] * (vol.grid.dims[axis] - 1) / 2
        new_center = out.grid.origin[axis] + out.grid.spacing[axis] * (out.grid.dims[axis] - 1) / 2
        assert abs(old_center - new_center) < 1e-6


def test_resample_to_standard_dims():
    vol = _vol((128, 128, 128), data=np.zeros((128, 128, 128), dtype=np.float32))
    out = resample_to(vol, (256, 192, 160))
    assert out.grid.dims == (256, 192, 160)
    for axis in range(3):
        assert abs(128 * 1.0 - out.grid.dims[axis] * out.grid.spacing[axis]) < 1e-6


def test_downsampled_linear_ramp_stays_linear():
    dims = (16, 12, 10)
    x, y, z = np.meshgrid(*[np.arange(d, dtype=float) for d in dims], indexing="ij")
    vol = _vol(dims, data=2.0 * x + 3.0 * y - 1.0 * z + 4.0)
    out = resample_to(vol, (8, 6, 5))
    # the trilinear sample of a trilinear function is the function itself,
    # so the output must equal the ramp evaluated at the mapped positions
    for axis, d in enumerate((8, 6, 5)):
        ratio = dims[axis] / d
        coords = (np.arange(d) + 0.5) * ratio - 0.5
        if axis == 0:
            xs = coords
        elif axis == 1:
            ys = coords
        else:
            zs = coords
    xg, yg, zg = np.meshgrid(xs, ys, zs, indexing="ij")
    expected = 2.0 * xg + 3.0 * yg - 1.0 * zg + 4.0
    assert np.allclose(out.data, expected, atol=1e-5)


def test_resample_mask_nearest_introduces_no_new_labels():
    dims = (8, 8, 8)
    rng = np.random.default_rng(7)
    labels = rng.integers(0, 4, size=dims).astype(np.int32)
    mask = LabelMask(VolumeGrid(dims), labels)
    out = resample_mask_to(mask, (16, 16, 16))
    assert out.grid.dims == (16, 16, 16)
    assert set(np.unique(out.labels)) <= set(np.unique(labels))
    assert out.labels.dtype == labels.dtype
    # 2x upsampling with voxel-center mapping lands every output voxel
    # nearest to source voxel floor((i + 0.5) / 2 + 0.5 - 0.5) = round(i/2 - 0.25)
    for i in (0, 1, 14, 15):
        src = int(np.floor((i + 0.5) * 0.5 - 0.5 + 0.5))
        src = min(max(src, 0), 7)
        assert out.labels[i, 0, 0] == labels[src, 0, 0]


# ---------------------------------------------------------------------------
# normalize_intensity


def test_minmax_maps_span_to_unit_interval():
    data = np.linspace(-1000.0, 1000.0, 64).reshape((4, 4, 4))
    out = normalize_intensity(_vol((4, 4, 4), data=data))
    assert out.data.min() == 0.0
    assert out.data.max() == 1.0
    mid = np.argwhere(np.isclose(data, 0.0, atol=16.0))
    assert np.allclose(out.data, (data + 1000.0) / 2000.0, atol=1e-12)
    assert out.intensity_unit == "normalized"
    assert mid.size >= 0  # the 0 -> 0.5 mapping follows from the linear map


def test_minmax_zero_maps_to_half_when_range_symmetric():
    data = np.zeros((3, 3, 3))
    data[0, 0, 0] = -1000.0
    data[2, 2, 2] = 1000.0
    out = normalize_intensity(_vol((3, 3, 3), data=data))
    assert out.data[1, 1, 1] == 0.5


def test_window_clamps_then_maps():
    data = np.array([-2000.0, -1024.0, -374.0, 276.0, 3000.0]).reshape((5, 1, 1))
    vol = Volume3D(VolumeGrid((5, 1, 1)), data)
    out = normalize_intensity(vol, ("window", -1024.0, 276.0))
    assert out.data[1, 0, 0] == 0.0
    assert out.data[3, 0, 0] == 1.0
    assert out.data[0, 0, 0] == 0.0  # clamped below
    assert out.data[4, 0, 0] == 1.0  # clamped above
    assert abs(out.data[2, 0, 0] - 0.5) < 1e-12


def test_window_zero_one_is_identity_on_unit_data():
    rng = np.random.default_rng(11)
    data = rng.random((6, 5, 4))
    out = normalize_intensity(_vol((6, 5, 4), data=data), ("window", 0.0, 1.0))
    assert np.allclose(out.data, data, atol=1e-7)


def test_constant_volume_warns_and_maps_to_half():
    vol = _vol((4, 4, 4), data=np.full((4, 4, 4), 37.0))
    with pytest.warns(UserWarning, match="constant"):
        out = normalize_intensity(vol)
    assert np.all(out.data == 0.5)


def test_bad_normalize_setting_rejected():
    with pytest.raises(ValueError, match="bad normalize"):
        normalize_intensity(_vol((4, 4, 4)), ("window", 5.0, 5.0))
    with pytest.raises(ValueError, match="bad normalize"):
        PreprocessSpec(normalize=("clamp", 0.0, 1.0))


def test_preprocess_spec_validation():
    spec = PreprocessSpec(target_dims=(64.0, 48, 40))
    assert spec.target_dims == (64, 48, 40)
    with pytest.raises(ValueError, match="target dims"):
        PreprocessSpec(target_dims=(8, 8))
    with pytest.raises(ValueError, match="target dims"):
        PreprocessSpec(target_dims=(4, 8, 8))
    with pytest.raises(ValueError, match="margin"):
        PreprocessSpec(crop_margin_voxels=-1)


# ---------------------------------------------------------------------------
# apply_chain


def test_chain_outputs_aligned_volume_and_mask():
    pair = generate_phantom(PhantomSpec(dims=(48, 36, 30), deform_max_voxels=0.0))
    spec = PreprocessSpec(target_dims=(32, 28, 24))
    vol, mask, info = apply_chain(pair.fixed, pair.fixed_mask, spec)
    assert vol.grid == mask.grid
    assert vol.grid.dims == (32, 28, 24)
    assert info["input_dims"] == (48, 36, 30)
    assert info["output_dims"] == (32, 28, 24)
    assert len(info["crop_box"]) == 3
    assert 0.0 <= vol.data.min() and vol.data.max() <= 1.0
    assert set(np.unique(mask.labels)) <= set(np.unique(pair.fixed_mask.labels))


def test_chain_near_identity_when_nothing_to_do():
    dims = (16, 16, 16)
    rng = np.random.default_rng(2)
    data = rng.random(dims)  # already in [0, 1)
    vol = _vol(dims, data=data)
    body = _body(dims, np.ones(dims))
    out, _, info = apply_chain(
        vol, body, PreprocessSpec(target_dims=dims, normalize=("window", 0.0, 1.0), crop_margin_voxels=0)
    )
    assert info["crop_box"] == ((0, 16), (0, 16), (0, 16))
    assert np.allclose(out.data, data, atol=1e-7)


def test_chain_preserves_organ_component_counts():
    pair = generate_phantom(PhantomSpec(dims=(64, 48, 40)))
    spec = PreprocessSpec(target_dims=(72, 56, 48))
    _, mask, _ = apply_chain(pair.fixed, pair.fixed_mask, spec)
    for label in (2, 3, 4, 5):
        _, n_before = ndimage.label(pair.fixed_mask.labels == label)
        _, n_after = ndimage.label(mask.labels == label)
        assert n_after == n_before, f"label {label}: {n_before} -> {n_after} components"
