"""Synthetic phantom pairs: determinism, ground truth, and validation."""

import numpy as np
import pytest

from fieldreg import (
    AffineJitter,
    AffineParams,
    PhantomSpec,
    folding_percentage,
    generate_phantom,
    hard_dice,
    warp_mask,
    warp_volume,
)

DIMS = (48, 36, 30)
ORGAN_LABELS = (2, 3, 4, 5)


def test_generation_is_bit_deterministic():
    a = generate_phantom(PhantomSpec(dims=DIMS, seed=5))
    b = generate_phantom(PhantomSpec(dims=DIMS, seed=5))
    assert np.array_equal(a.fixed.data, b.fixed.data)
    assert np.array_equal(a.moving.data, b.moving.data)
    assert np.array_equal(a.fixed_mask.labels, b.fixed_mask.labels)
    assert np.array_equal(a.moving_mask.labels, b.moving_mask.labels)
    assert np.array_equal(a.true_field.vectors, b.true_field.vectors)
    assert a.true_affine.m == b.true_affine.m


def test_different_seeds_differ():
    a = generate_phantom(PhantomSpec(dims=DIMS, seed=0))
    b = generate_phantom(PhantomSpec(dims=DIMS, seed=1))
    assert not np.array_equal(a.fixed.data, b.fixed.data)
    assert a.true_affine.m != b.true_affine.m


def test_no_motion_means_identical_pair():
    spec = PhantomSpec(
        dims=DIMS,
        deform_max_voxels=0.0,
        exact_affine=AffineParams.identity(),
    )
    pair = generate_phantom(spec)
    assert np.array_equal(pair.true_field.vectors, np.zeros(DIMS + (3,)))
    assert np.allclose(pair.fixed.data, pair.moving.data, atol=1e-9)
    assert np.array_equal(pair.fixed_mask.labels, pair.moving_mask.labels)
    assert pair.true_affine.m == AffineParams.identity().m


def test_exact_affine_is_honoured():
    aff = AffineParams.from_parts(np.eye(3), np.array([1.0, -2.0, 0.5]))
    pair = generate_phantom(PhantomSpec(dims=DIMS, deform_max_voxels=0.0, exact_affine=aff))
    assert pair.true_affine.m == aff.m
    # pure translation: the true field is that translation everywhere
    assert np.allclose(pair.true_field.vectors[..., 0], 1.0)
    assert np.allclose(pair.true_field.vectors[..., 1], -2.0)
    assert np.allclose(pair.true_field.vectors[..., 2], 0.5)


def test_true_field_reconstructs_fixed_volume():
    pair = generate_phantom(PhantomSpec(dims=(64, 48, 40), seed=0, deform_max_voxels=8.0))
    recon = warp_volume(pair.moving, pair.true_field)
    spread = pair.fixed.data.max() - pair.fixed.data.min()
    mean_err = float(np.abs(recon.data - pair.fixed.data).mean())
    assert mean_err < 0.02 * spread


def test_true_field_gives_perfect_mask_dice():
    pair = generate_phantom(PhantomSpec(dims=DIMS, seed=3, deform_max_voxels=6.0))
    warped = warp_mask(pair.moving_mask, pair.true_field)
    for label in ORGAN_LABELS:
        assert hard_dice(pair.fixed_mask, warped, label) == 1.0


def test_true_field_has_no_folding():
    for seed in (0, 1):
        pair = generate_phantom(PhantomSpec(dims=DIMS, seed=seed, deform_max_voxels=8.0))
        assert folding_percentage(pair.true_field) == 0.0


def test_deformation_peak_matches_requested_maximum():
    spec = PhantomSpec(dims=DIMS, seed=2, deform_max_voxels=5.0, exact_affine=AffineParams.identity())
    pair = generate_phantom(spec)
    mags = np.sqrt((pair.true_field.vectors**2).sum(axis=-1))
    assert abs(mags.max() - 5.0) < 1e-9


def test_raw_dice_sits_in_the_documented_band():
    for seed in (0, 1, 2):
        pair = generate_phantom(PhantomSpec(dims=(64, 48, 40), seed=seed, deform_max_voxels=8.0))
        for label in ORGAN_LABELS:
            d = hard_dice(pair.fixed_mask, pair.moving_mask, label)
            assert 0.2 < d < 0.85, f"seed {seed} label {label}: raw dice {d}"


def test_all_labels_present():
    pair = generate_phantom(PhantomSpec(dims=DIMS))
    assert set(np.unique(pair.moving_mask.labels)) == {0, 1, 2, 3, 4, 5}
    assert pair.moving_mask.label_names[5] == "pancreas"


def test_masks_follow_nearest_neighbour_ground_truth():
    pair = generate_phantom(PhantomSpec(dims=DIMS, seed=4, deform_max_voxels=4.0))
    warped = warp_mask(pair.moving_mask, pair.true_field)
    assert np.array_equal(warped.labels, pair.fixed_mask.labels)


def test_spec_validation():
    with pytest.raises(ValueError, match=">= 16"):
        PhantomSpec(dims=(15, 48, 40))
    with pytest.raises(ValueError, match="3 values"):
        PhantomSpec(dims=(48, 40))
    with pytest.raises(ValueError, match="deform_max_voxels"):
        PhantomSpec(deform_max_voxels=-1.0)
    with pytest.raises(ValueError, match="smoothness"):
        PhantomSpec(deform_smoothness_sigma=0.0)
    with pytest.raises(ValueError, match="jitter"):
        AffineJitter(translation_voxels=-0.5)


def test_organs_must_fit_in_small_dims():
    with pytest.raises(ValueError, match="do not fit"):
        generate_phantom(PhantomSpec(dims=(16, 16, 16)))
