"""Similarity, overlap, and smoothness losses with analytic field gradients.

The composite objective minimized per stage is

    total = alpha * (-MI) + lam * (1 - meanDice) + beta * bendingEnergy

Mutual information uses a Parzen-windowed joint histogram: every sample
spreads a Gaussian kernel (width ``parzen_sigma`` in bin units, truncated at
3 sigma, renormalized per sample) over the intensity bins, so the histogram
and hence MI are differentiable in the warped intensities.  The Dice term is
the soft Dice of trilinearly warped per-organ indicator volumes.  Bending
energy is the mean squared second difference of the field over interior
voxels.  All gradients are exact derivatives of the discretized losses.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .grid import DisplacementField, LabelMask, LossWeights, Volume3D, mask_to_binary
from .validation import check_same_grid
from .warp import InterpSpec, index_grid, sample_trilinear, warp_volume

_EPS_DICE = 1e-6


@dataclass(frozen=True)
class MISpec:
    """Parzen-histogram settings for the mutual-information term.

    ``intensity_range`` is either "auto" (span of the pair) or an explicit
    (lo, hi); values outside an explicit range are clamped to its edges.
    ``sample_mask`` restricts contributing voxels to those with a positive
    label (region gating).
    """

    bins: int = 32
    parzen_sigma: float = 1.0
    intensity_range: object = "auto"
    sample_mask: LabelMask | None = None

    def __post_init__(self):
        if self.bins < 4:
            raise ValueError("MI needs at least 4 bins")
        if self.parzen_sigma <= 0:
            raise ValueError("parzen_sigma must be positive")
        if self.intensity_range != "auto":
            lo, hi = self.intensity_range
            if not hi > lo:
                raise ValueError(f"degenerate intensity range ({lo}, {hi})")


@dataclass(frozen=True)
class LossBreakdown:
    mi: float
    dice: float
    bending: float
    total: float
    weights: LossWeights


def _resolve_range(fixed_vals, warped_vals, spec: MISpec):
    if spec.intensity_range == "auto":
        lo = min(fixed_vals.min(), warped_vals.min())
        hi = max(fixed_vals.max(), warped_vals.max())
        if hi <= lo:
            return None  # fewer than 2 distinct values: MI is 0 by definition
        return float(lo), float(hi)
    lo, hi = spec.intensity_range
    return float(lo), float(hi)


def _parzen_weights(t: np.ndarray, bins: int, sigma: float, with_derivative: bool):
    """Per-sample kernel weights over nearby bins.

    Returns (bin_indices, weights[, dweights/dt]) with shapes (n, K).  Weights
    are normalized to sum to 1 per sample; bins outside [0, bins) or beyond
    the 3-sigma cut get zero weight.
    """
    r = int(math.floor(3.0 * sigma + 0.5))
    base = np.floor(t + 0.5).astype(np.int64)
    offsets = np.arange(-r, r + 1, dtype=np.int64)
    k = base[:, None] + offsets[None, :]
    delta = k.astype(np.float64) - t[:, None]
    inside = (np.abs(delta) <= 3.0 * sigma) & (k >= 0) & (k < bins)
    w = np.where(inside, np.exp(-(delta**2) / (2.0 * sigma**2)), 0.0)
    s = w.sum(axis=1)
    # Very small sigma can leave a sample with no surviving bin; fall back to
    # a hard assignment to its nearest in-range bin.
    empty = s == 0.0
    if np.any(empty):
        center = np.clip(base[empty], 0, bins - 1)
        col = np.clip(center - base[empty], -r, r) + r
        w[np.flatnonzero(empty), col] = 1.0
        s = w.sum(axis=1)
    k = np.clip(k, 0, bins - 1)
    w_norm = w / s[:, None]
    if not with_derivative:
        return k, w_norm
    dw = np.where(inside, w * delta / sigma**2, 0.0)
    ds = dw.sum(axis=1)
    dw_norm = dw / s[:, None] - w_norm * (ds / s)[:, None]
    return k, w_norm, dw_norm


def _joint_histogram(kf, wf, kw, ww, bins: int) -> np.ndarray:
    h = np.zeros(bins * bins)
    for a in range(kf.shape[1]):
        wfa = wf[:, a]
        if not wfa.any():
            continue
        ka = kf[:, a] * bins
        for b in range(kw.shape[1]):
            h += np.bincount(ka + kw[:, b], weights=wfa * ww[:, b], minlength=bins * bins)
    return h.reshape(bins, bins)


def _mi_eval(fv: np.ndarray, wv: np.ndarray, spec: MISpec, need_grad: bool):
    """MI of the value pair and, optionally, dMI/d(warped value) per sample."""
    zeros = np.zeros_like(wv) if need_grad else None
    if fv.size == 0:
        return 0.0, zeros
    rng = _resolve_range(fv, wv, spec)
    if rng is None:
        return 0.0, zeros
    lo, hi = rng
    n = fv.size
    scale = (spec.bins - 1) / (hi - lo)
    tf = np.clip((fv - lo) * scale, 0.0, spec.bins - 1)
    tw = np.clip((wv - lo) * scale, 0.0, spec.bins - 1)
    kf, wf = _parzen_weights(tf, spec.bins, spec.parzen_sigma, False)
    if need_grad:
        kw, ww, dww = _parzen_weights(tw, spec.bins, spec.parzen_sigma, True)
    else:
        kw, ww = _parzen_weights(tw, spec.bins, spec.parzen_sigma, False)
    h = _joint_histogram(kf, wf, kw, ww, spec.bins)
    p = h / h.sum()
    pf = p.sum(axis=1)
    pw = p.sum(axis=0)
    nz = p > 0.0
    outer = pf[:, None] * pw[None, :]
    mi = float(np.sum(p[nz] * np.log(p[nz] / outer[nz])))
    if not need_grad:
        return mi, None
    # dMI/dp[i, j] = log(p / (pf pw)) - 1 wherever p > 0; the chain below only
    # ever reads entries whose sample weight product is nonzero, and those
    # necessarily have p > 0.
    lterm = np.zeros_like(p)
    lterm[nz] = np.log(p[nz] / outer[nz]) - 1.0
    lflat = lterm.reshape(-1)
    dmi_dw = np.zeros(n)
    for a in range(kf.shape[1]):
        wfa = wf[:, a]
        if not wfa.any():
            continue
        ka = kf[:, a] * spec.bins
        for b in range(kw.shape[1]):
            dmi_dw += lflat[ka + kw[:, b]] * wfa * dww[:, b]
    dmi_dw *= scale / n
    # Samples clamped to the range edge have a locally constant bin
    # coordinate, so their derivative through the histogram is zero.
    edge = ((wv - lo) * scale < 0.0) | ((wv - lo) * scale > spec.bins - 1)
    dmi_dw[edge] = 0.0
    return mi, dmi_dw


def _gather_pair(fixed: Volume3D, warped: Volume3D, spec: MISpec):
    check_same_grid(fixed, warped, "fixed and warped volumes")
    if spec.sample_mask is not None:
        check_same_grid(fixed, spec.sample_mask, "volume and MI sample mask")
    fv = fixed.data.reshape(-1)
    wv = warped.data.reshape(-1)
    if spec.sample_mask is not None:
        idx = np.flatnonzero(spec.sample_mask.labels.reshape(-1) > 0)
        return fv[idx], wv[idx], idx
    return fv, wv, None


def mutual_information(fixed: Volume3D, warped: Volume3D, spec: MISpec = MISpec()) -> float:
    """MI in nats, >= 0, from the Parzen joint histogram of the pair."""
    fv, wv, _ = _gather_pair(fixed, warped, spec)
    mi, _ = _mi_eval(fv, wv, spec, need_grad=False)
    return mi


def _scatter_mi_gradient(dmi_dw, idx, spatial, grid) -> np.ndarray:
    g_w = np.zeros(grid.voxel_count)
    if idx is None:
        g_w[:] = dmi_dw
    else:
        g_w[idx] = dmi_dw
    return -g_w.reshape(grid.dims)[..., None] * spatial


def mi_gradient(
    fixed: Volume3D,
    warped: Volume3D,
    moving: Volume3D,
    field: DisplacementField,
    spec: MISpec = MISpec(),
    interp: InterpSpec = InterpSpec(),
) -> DisplacementField:
    """Gradient of -MI with respect to the displacement field.

    ``warped`` must be ``warp_volume(moving, field, interp)``; the chain rule
    runs through the Parzen weights of the warped intensities and the spatial
    derivative of the trilinear interpolant of ``moving``.
    """
    check_same_grid(moving, field, "moving volume and field")
    fv, wv, idx = _gather_pair(fixed, warped, spec)
    _, dmi_dw = _mi_eval(fv, wv, spec, need_grad=True)
    pos = index_grid(field.grid.dims) + field.vectors
    _, spatial = sample_trilinear(moving.data, pos, interp.padding, with_grad=True)
    return DisplacementField(
        field.grid, _scatter_mi_gradient(dmi_dw, idx, spatial, field.grid)
    )


def soft_dice(fixed_mask: LabelMask, warped_organ_probs, organ_labels) -> float:
    """Mean soft Dice over organs: 2 sum(p g) / (sum p + sum g + eps)."""
    organ_labels = list(organ_labels)
    probs = list(warped_organ_probs)
    if len(probs) != len(organ_labels):
        raise ValueError(
            f"{len(probs)} probability volumes for {len(organ_labels)} organ labels"
        )
    if not organ_labels:
        return 1.0
    dices = []
    for vol, label in zip(probs, organ_labels):
        check_same_grid(fixed_mask, vol, "fixed mask and organ probability volume")
        p = vol.data
        if p.min() < -1e-9 or p.max() > 1.0 + 1e-9:
            raise ValueError(
                f"organ {label} probabilities outside [0, 1]: "
                f"[{p.min():.3g}, {p.max():.3g}]"
            )
        g = (fixed_mask.labels == label).astype(np.float64)
        dices.append(2.0 * np.sum(p * g) / (p.sum() + g.sum() + _EPS_DICE))
    return float(np.mean(dices))


def soft_dice_gradient(
    fixed_mask: LabelMask,
    moving_mask: LabelMask,
    field: DisplacementField,
    organ_labels,
    interp: InterpSpec = InterpSpec(),
) -> DisplacementField:
    """Gradient of (1 - meanDice) with respect to the field, where the organ
    probabilities are the trilinearly warped moving indicators."""
    check_same_grid(fixed_mask, field, "fixed mask and field")
    check_same_grid(moving_mask, field, "moving mask and field")
    organ_labels = list(organ_labels)
    grad = np.zeros(field.grid.dims + (3,))
    if not organ_labels:
        return DisplacementField(field.grid, grad)
    pos = index_grid(field.grid.dims) + field.vectors
    k = len(organ_labels)
    for label in organ_labels:
        indicator = mask_to_binary(moving_mask, {label}).data
        p, spatial = sample_trilinear(indicator, pos, interp.padding, with_grad=True)
        g = (fixed_mask.labels == label).astype(np.float64)
        s = p.sum() + g.sum() + _EPS_DICE
        inter = np.sum(p * g)
        ddice_dp = (2.0 * g * s - 2.0 * inter) / (s * s)
        grad -= (ddice_dp / k)[..., None] * spatial
    return DisplacementField(field.grid, grad)


def _second_differences(u: np.ndarray):
    """Pure and mixed central second differences on the all-axes interior."""
    c = u[1:-1, 1:-1, 1:-1]
    dxx = u[2:, 1:-1, 1:-1] - 2.0 * c + u[:-2, 1:-1, 1:-1]
    dyy = u[1:-1, 2:, 1:-1] - 2.0 * c + u[1:-1, :-2, 1:-1]
    dzz = u[1:-1, 1:-1, 2:] - 2.0 * c + u[1:-1, 1:-1, :-2]
    dxy = (
        u[2:, 2:, 1:-1] - u[2:, :-2, 1:-1] - u[:-2, 2:, 1:-1] + u[:-2, :-2, 1:-1]
    ) / 4.0
    dxz = (
        u[2:, 1:-1, 2:] - u[2:, 1:-1, :-2] - u[:-2, 1:-1, 2:] + u[:-2, 1:-1, :-2]
    ) / 4.0
    dyz = (
        u[1:-1, 2:, 2:] - u[1:-1, 2:, :-2] - u[1:-1, :-2, 2:] + u[1:-1, :-2, :-2]
    ) / 4.0
    return dxx, dyy, dzz, dxy, dxz, dyz


def bending_energy(field: DisplacementField) -> float:
    """Mean squared second derivative of the field over interior voxels.

    Zero for any affine-generated field.  Grids thinner than 3 voxels on an
    axis have no interior stencil; the energy is then 0 (with a warning).
    """
    if min(field.grid.dims) < 3:
        warnings.warn("bending energy undefined for dims < 3; returning 0", stacklevel=2)
        return 0.0
    dxx, dyy, dzz, dxy, dxz, dyz = _second_differences(field.vectors)
    n_int = dxx[..., 0].size
    total = (
        np.sum(dxx**2)
        + np.sum(dyy**2)
        + np.sum(dzz**2)
        + 2.0 * np.sum(dxy**2)
        + 2.0 * np.sum(dxz**2)
        + 2.0 * np.sum(dyz**2)
    )
    return float(total / (3.0 * n_int))


def bending_gradient(field: DisplacementField) -> DisplacementField:
    """Analytic gradient of ``bending_energy``: adjoint stencils applied to
    the second differences."""
    if min(field.grid.dims) < 3:
        return DisplacementField(field.grid, np.zeros(field.grid.dims + (3,)))
    u = field.vectors
    dxx, dyy, dzz, dxy, dxz, dyz = _second_differences(u)
    n_int = dxx[..., 0].size
    g = np.zeros_like(u)
    i = slice(1, -1)

    def pure(d, axis):
        lo = [i, i, i]
        hi = [i, i, i]
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        g[tuple(lo)] += d
        g[i, i, i] += -2.0 * d
        g[tuple(hi)] += d

    def mixed(d, ax1, ax2):
        for s1, c1 in ((slice(2, None), 1.0), (slice(0, -2), -1.0)):
            for s2, c2 in ((slice(2, None), 1.0), (slice(0, -2), -1.0)):
                sl = [i, i, i]
                sl[ax1] = s1
                sl[ax2] = s2
                g[tuple(sl)] += (c1 * c2 / 4.0) * d

    pure(dxx, 0)
    pure(dyy, 1)
    pure(dzz, 2)
    mixed(2.0 * dxy, 0, 1)
    mixed(2.0 * dxz, 0, 2)
    mixed(2.0 * dyz, 1, 2)
    g *= 2.0 / (3.0 * n_int)
    return DisplacementField(field.grid, g)


def composite_loss(
    fixed: Volume3D,
    moving: Volume3D,
    field: DisplacementField,
    fixed_mask: LabelMask,
    moving_mask: LabelMask,
    organ_labels,
    weights: LossWeights = LossWeights(),
    mi_spec: MISpec = MISpec(),
    interp: InterpSpec = InterpSpec(),
) -> LossBreakdown:
    """Evaluate all three terms on warp(moving, field) and combine."""
    check_same_grid(fixed, moving, "fixed and moving volumes")
    check_same_grid(fixed, field, "fixed volume and field")
    warped = warp_volume(moving, field, interp)
    mi = mutual_information(fixed, warped, mi_spec)
    pos = index_grid(field.grid.dims) + field.vectors
    probs = [
        Volume3D(
            field.grid,
            sample_trilinear(mask_to_binary(moving_mask, {lab}).data, pos, interp.padding),
        )
        for lab in organ_labels
    ]
    dice = soft_dice(fixed_mask, probs, organ_labels)
    bending = bending_energy(field)
    total = weights.alpha * (-mi) + weights.lam * (1.0 - dice) + weights.beta * bending
    return LossBreakdown(mi=mi, dice=dice, bending=bending, total=total, weights=weights)


def composite_loss_and_grad(
    fixed: Volume3D,
    moving: Volume3D,
    field: DisplacementField,
    fixed_mask: LabelMask,
    moving_mask: LabelMask,
    organ_labels,
    weights: LossWeights = LossWeights(),
    mi_spec: MISpec = MISpec(),
    interp: InterpSpec = InterpSpec(),
):
    """Composite loss and its field gradient in one pass.

    Shares the warp and interpolant-derivative computations between the
    value and the gradient; returns (LossBreakdown, DisplacementField).
    Gradient work for a term is skipped when its weight is zero.
    """
    check_same_grid(fixed, moving, "fixed and moving volumes")
    check_same_grid(fixed, field, "fixed volume and field")
    check_same_grid(fixed, fixed_mask, "fixed volume and fixed mask")
    check_same_grid(moving, moving_mask, "moving volume and moving mask")
    organ_labels = list(organ_labels)
    pos = index_grid(field.grid.dims) + field.vectors
    w_data, spatial = sample_trilinear(moving.data, pos, interp.padding, with_grad=True)
    warped = Volume3D(field.grid, w_data)
    grad = np.zeros(field.grid.dims + (3,))

    need_mi_grad = weights.alpha > 0
    fv, wv, idx = _gather_pair(fixed, warped, mi_spec)
    mi, dmi_dw = _mi_eval(fv, wv, mi_spec, need_grad=need_mi_grad)
    if need_mi_grad:
        grad += weights.alpha * _scatter_mi_gradient(dmi_dw, idx, spatial, field.grid)

    if organ_labels:
        need_dice_grad = weights.lam > 0
        k = len(organ_labels)
        dices = []
        for label in organ_labels:
            indicator = mask_to_binary(moving_mask, {label}).data
            sampled = sample_trilinear(
                indicator, pos, interp.padding, with_grad=need_dice_grad
            )
            p, p_spatial = sampled if need_dice_grad else (sampled, None)
            g = (fixed_mask.labels == label).astype(np.float64)
            s = p.sum() + g.sum() + _EPS_DICE
            inter = np.sum(p * g)
            dices.append(2.0 * inter / s)
            if need_dice_grad:
                ddice_dp = (2.0 * g * s - 2.0 * inter) / (s * s)
                grad -= weights.lam * (ddice_dp / k)[..., None] * p_spatial
        dice = float(np.mean(dices))
    else:
        dice = 1.0

    bending = bending_energy(field)
    if weights.beta > 0:
        grad += weights.beta * bending_gradient(field).vectors

    total = weights.alpha * (-mi) + weights.lam * (1.0 - dice) + weights.beta * bending
    breakdown = LossBreakdown(
        mi=mi, dice=dice, bending=bending, total=total, weights=weights
    )
    return breakdown, DisplacementField(field.grid, grad)


def composite_gradient(
    fixed: Volume3D,
    moving: Volume3D,
    field: DisplacementField,
    fixed_mask: LabelMask,
    moving_mask: LabelMask,
    organ_labels,
    weights: LossWeights = LossWeights(),
    mi_spec: MISpec = MISpec(),
    interp: InterpSpec = InterpSpec(),
) -> DisplacementField:
    """Gradient of the composite total with respect to the field."""
    _, grad = composite_loss_and_grad(
        fixed, moving, field, fixed_mask, moving_mask, organ_labels,
        weights, mi_spec, interp,
    )
    return grad
