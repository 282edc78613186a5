"""Core types and elementary grid arithmetic."""

import numpy as np
import pytest

from fieldreg import (
    DisplacementField,
    GridMismatchError,
    LabelMask,
    LossWeights,
    NonFiniteDataError,
    Volume3D,
    VolumeGrid,
    add_fields,
    folding_percentage,
    make_volume,
    mask_to_binary,
    warp_volume,
    zero_field,
)


def test_make_volume_constant_fill():
    vol = make_volume(VolumeGrid((2, 2, 2)), 0.0)
    assert vol.data.shape == (2, 2, 2)
    assert np.all(vol.data == 0.0)


def test_make_volume_single_voxel():
    vol = make_volume(VolumeGrid((1, 1, 1)), 5.0)
    assert vol.data.shape == (1, 1, 1)
    assert vol.data[0, 0, 0] == 5.0


def test_empty_dimension_rejected():
    with pytest.raises(ValueError, match="empty dimension"):
        VolumeGrid((0, 2, 2))


def test_nonpositive_spacing_rejected():
    with pytest.raises(ValueError, match="spacing"):
        VolumeGrid((2, 2, 2), spacing=(1.0, 0.0, 1.0))


def test_volume_rejects_nan():
    data = np.zeros((2, 2, 2))
    data[0, 0, 0] = np.nan
    with pytest.raises(NonFiniteDataError):
        Volume3D(VolumeGrid((2, 2, 2)), data)


def test_field_rejects_inf():
    vectors = np.zeros((2, 2, 2, 3))
    vectors[1, 1, 1, 2] = np.inf
    with pytest.raises(NonFiniteDataError):
        DisplacementField(VolumeGrid((2, 2, 2)), vectors)


def test_zero_field_is_all_zero_vectors():
    field = zero_field(VolumeGrid((4, 4, 4)))
    assert field.vectors.shape == (4, 4, 4, 3)
    assert np.count_nonzero(field.vectors) == 0


def test_zero_field_warp_is_identity_bit_exact():
    rng = np.random.default_rng(0)
    grid = VolumeGrid((5, 4, 3))
    vol = Volume3D(grid, rng.normal(size=grid.dims))
    warped = warp_volume(vol, zero_field(grid))
    assert np.array_equal(warped.data, vol.data)


def test_zero_field_has_no_folding():
    assert folding_percentage(zero_field(VolumeGrid((4, 4, 4)))) == 0.0


def test_add_fields_zero_is_additive_identity():
    rng = np.random.default_rng(1)
    grid = VolumeGrid((3, 3, 3))
    f = DisplacementField(grid, rng.normal(size=grid.dims + (3,)))
    summed = add_fields(f, zero_field(grid))
    assert np.array_equal(summed.vectors, f.vectors)


def test_add_fields_constant_vectors():
    grid = VolumeGrid((2, 3, 2))
    a = DisplacementField(grid, np.broadcast_to([1.0, 0, 0], grid.dims + (3,)).copy())
    b = DisplacementField(grid, np.broadcast_to([0, 2.0, 0], grid.dims + (3,)).copy())
    summed = add_fields(a, b)
    assert np.all(summed.vectors == [1.0, 2.0, 0.0])


def test_add_fields_association_order_irrelevant():
    # Fold-left over four random fields vs other association orders.
    rng = np.random.default_rng(2)
    grid = VolumeGrid((8, 8, 8))
    fields = [
        DisplacementField(grid, rng.normal(size=grid.dims + (3,))) for _ in range(4)
    ]
    a, b, c, d = fields
    left = add_fields(add_fields(add_fields(a, b), c), d)
    right = add_fields(a, add_fields(b, add_fields(c, d)))
    middle = add_fields(add_fields(a, b), add_fields(c, d))
    assert np.allclose(left.vectors, right.vectors, atol=1e-12)
    assert np.allclose(left.vectors, middle.vectors, atol=1e-12)


def test_add_fields_commutative():
    rng = np.random.default_rng(3)
    grid = VolumeGrid((4, 4, 4))
    a = DisplacementField(grid, rng.normal(size=grid.dims + (3,)))
    b = DisplacementField(grid, rng.normal(size=grid.dims + (3,)))
    assert np.array_equal(add_fields(a, b).vectors, add_fields(b, a).vectors)


def test_add_fields_grid_mismatch():
    a = zero_field(VolumeGrid((4, 4, 4)))
    b = zero_field(VolumeGrid((4, 4, 5)))
    with pytest.raises(GridMismatchError):
        add_fields(a, b)


def test_mask_to_binary_full_selection():
    grid = VolumeGrid((3, 3, 3))
    mask = LabelMask(grid, np.full(grid.dims, 3, dtype=np.int32))
    indicator = mask_to_binary(mask, {3})
    assert np.all(indicator.data == 1.0)


def test_mask_to_binary_unknown_label():
    grid = VolumeGrid((2, 2, 2))
    labels = np.zeros(grid.dims, dtype=np.int32)
    labels[0, 0, 0] = 3
    mask = LabelMask(grid, labels)
    with pytest.raises(ValueError, match="known labels"):
        mask_to_binary(mask, {9})


def test_mask_to_binary_matches_per_voxel_scan():
    rng = np.random.default_rng(4)
    grid = VolumeGrid((4, 4, 4))
    labels = rng.choice([0, 2, 3], size=grid.dims).astype(np.int32)
    mask = LabelMask(grid, labels)
    indicator = mask_to_binary(mask, {2, 3})
    for x in range(4):
        for y in range(4):
            for z in range(4):
                expected = 1.0 if labels[x, y, z] in (2, 3) else 0.0
                assert indicator.data[x, y, z] == expected


def test_mask_to_binary_values_are_binary():
    rng = np.random.default_rng(5)
    grid = VolumeGrid((5, 5, 5))
    mask = LabelMask(grid, rng.choice([0, 1, 2], size=grid.dims).astype(np.int32))
    indicator = mask_to_binary(mask, {1})
    assert set(np.unique(indicator.data)) <= {0.0, 1.0}


def test_mask_requires_names_for_present_labels():
    grid = VolumeGrid((2, 2, 2))
    labels = np.full(grid.dims, 7, dtype=np.int32)
    with pytest.raises(ValueError, match="unnamed"):
        LabelMask(grid, labels, label_names={0: "background"})


def test_loss_weights_defaults():
    weights = LossWeights()
    assert (weights.alpha, weights.lam, weights.beta) == (1.0, 1.0, 0.5)


def test_loss_weights_need_a_data_term():
    with pytest.raises(ValueError, match="data term"):
        LossWeights(alpha=0.0, lam=0.0, beta=1.0)


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError, match="non-negative"):
        LossWeights(alpha=-0.1)


def test_stored_arrays_are_read_only():
    grid = VolumeGrid((2, 2, 2))
    vol = make_volume(grid, 1.0)
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 2.0
