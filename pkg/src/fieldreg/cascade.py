"""Staged registration: affine, thorax, abdomen, whole-body fields summed.

Stages run in order; each optimizes only its own parameters (a 12-vector of
affine coefficients or a dense displacement field) while the summed field
of all earlier stages stays frozen, and the loss is always evaluated on
``warp(moving, incoming + stage_field)``.  Region gating restricts the
loss support — the MI term samples only voxels whose fixed-mask label is in
the stage's region set, and the Dice term covers only the stage's organ
list — without cropping, so every stage field lives on the full grid and
the total deformation is their plain per-voxel sum.

In the diagnostic ``compose_warps`` mode each stage instead registers the
previously warped image from a zero incoming field, and the cumulative map
is the functional composition of the stage maps; repeated resampling blurs
the chained image, which is why summation is the default.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .grid import (
    DisplacementField,
    LabelMask,
    LossWeights,
    Volume3D,
    add_fields,
    zero_field,
)
from .losses import LossBreakdown, MISpec, composite_loss_and_grad
from .optim import OptimizerSpec, PyramidLevel, minimize_pyramid
from .validation import check_same_grid
from .warp import (
    AffineParams,
    InterpSpec,
    affine_to_field,
    downsample,
    downsample_field,
    downsample_mask,
    index_grid,
    sample_trilinear,
    upsample_field,
    warp_mask,
    warp_volume,
)

_MIN_LEVEL_DIM = 4


class StageAbortError(RuntimeError):
    """A stage's optimization hit a non-finite loss or gradient."""

    def __init__(self, stage: str, iteration: int, partial_results=()):
        super().__init__(
            f"stage {stage!r} aborted: non-finite loss or gradient "
            f"at iteration {iteration}"
        )
        self.stage = stage
        self.iteration = iteration
        self.partial_results = tuple(partial_results)


@dataclass(frozen=True)
class StageConfig:
    """Settings for one cascade stage.

    ``region_labels`` gates the MI samples by fixed-mask label (empty set =
    whole volume); ``organ_labels`` lists the Dice organs.  For deformable
    stages ``field_smoothing_sigma`` > 0 Gaussian-smooths each update before
    it is applied (affine stages ignore it).
    """

    kind: str  # "affine" | "deformable"
    name: str
    region_labels: frozenset = frozenset()
    organ_labels: tuple = ()
    weights: LossWeights = LossWeights()
    pyramid_levels: int = 3
    iterations_per_level: int = 60
    step_size: float = 0.4
    field_smoothing_sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("affine", "deformable"):
            raise ValueError(f"unknown stage kind {self.kind!r}")
        if not self.name:
            raise ValueError("stage needs a name")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.iterations_per_level < 1:
            raise ValueError("iterations_per_level must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.field_smoothing_sigma < 0:
            raise ValueError("field_smoothing_sigma must be >= 0")
        object.__setattr__(self, "region_labels", frozenset(int(v) for v in self.region_labels))
        object.__setattr__(self, "organ_labels", tuple(int(v) for v in self.organ_labels))


@dataclass(frozen=True)
class CascadePlan:
    stages: tuple = ()
    combine: str = "sum_fields"  # sum_fields | compose_warps

    def __post_init__(self):
        stages = tuple(self.stages)
        if self.combine not in ("sum_fields", "compose_warps"):
            raise ValueError(f"unknown combine mode {self.combine!r}")
        affine_at = [k for k, s in enumerate(stages) if s.kind == "affine"]
        if len(affine_at) > 1:
            raise ValueError("at most one affine stage is allowed")
        if affine_at and affine_at[0] != 0:
            raise ValueError("the affine stage must come first")
        object.__setattr__(self, "stages", stages)


@dataclass(frozen=True)
class StageResult:
    """One stage's output: its own field, the cumulative field after it, the
    recovered affine parameters (affine stages only), and the best-so-far
    loss breakdown per finest-level iteration."""

    name: str
    field: DisplacementField
    affine: AffineParams | None
    loss_trace: tuple
    cumulative_field: DisplacementField


def default_plan(
    affine_iterations: int = 120,
    deformable_iterations: int = 48,
    pyramid_levels: int = 3,
    affine_step: float = 0.05,
    deformable_step: float = 0.4,
    field_smoothing_sigma: float = 1.0,
    weights: LossWeights = LossWeights(alpha=1.0, lam=2.0, beta=10.0),
) -> CascadePlan:
    """The standard four-stage plan.

    The affine stage aligns globally, gated to the body (Dice on the body
    label); the thorax stage focuses on the lung region, the abdomen stage
    on liver/kidney/pancreas, and the final whole-body stage sees the whole
    volume with every organ's Dice to reconcile the regions.

    The default weights lean harder on Dice overlap and bending energy than
    the ``LossWeights`` type defaults: when a stage's similarity term is
    gated to a sub-region, the heavier regularization keeps the far field
    from drifting away from identity.
    """

    def deformable(name, region, organs):
        return StageConfig(
            kind="deformable",
            name=name,
            region_labels=frozenset(region),
            organ_labels=tuple(organs),
            weights=weights,
            pyramid_levels=pyramid_levels,
            iterations_per_level=deformable_iterations,
            step_size=deformable_step,
            field_smoothing_sigma=field_smoothing_sigma,
        )

    stages = (
        StageConfig(
            kind="affine",
            name="affine",
            region_labels=frozenset({1, 2, 3, 4, 5}),
            organ_labels=(1,),
            weights=weights,
            pyramid_levels=pyramid_levels,
            iterations_per_level=affine_iterations,
            step_size=affine_step,
            field_smoothing_sigma=0.0,
        ),
        deformable("thorax", {2}, (2,)),
        deformable("abdomen", {3, 4, 5}, (3, 4, 5)),
        deformable("wholebody", (), (2, 3, 4, 5)),
    )
    return CascadePlan(stages=stages)


def _pyramid_factors(dims, levels: int):
    """Downsampling factors coarse to fine; levels that would shrink any
    axis under 4 voxels are dropped."""
    factors = []
    for k in range(levels - 1, -1, -1):
        f = 2**k
        if f == 1 or min(d // f for d in dims) >= _MIN_LEVEL_DIM:
            factors.append(f)
    return factors


@dataclass
class _LevelData:
    grid: object
    fixed: Volume3D
    moving: Volume3D
    fmask: LabelMask
    mmask: LabelMask
    incoming: np.ndarray
    mi_spec: MISpec
    organ_labels: tuple


def _level_mi_spec(fixed, moving, fmask, region_labels, interp) -> MISpec:
    lo = float(min(fixed.data.min(), moving.data.min()))
    hi = float(max(fixed.data.max(), moving.data.max()))
    if interp.padding == "zeros":
        lo, hi = min(lo, 0.0), max(hi, 0.0)
    rng = (lo, hi) if hi > lo else "auto"
    mask = None
    if region_labels:
        member = np.isin(fmask.labels, sorted(region_labels)).astype(np.int32)
        if member.any():  # a region absent at this resolution gates nothing
            mask = LabelMask(fmask.grid, member, label_names={0: "outside", 1: "inside"})
    return MISpec(intensity_range=rng, sample_mask=mask)


def _build_level(fixed, moving, fmask, mmask, incoming, factor, config, interp):
    if factor > 1:
        fixed = downsample(fixed, factor)
        moving = downsample(moving, factor)
        fmask = downsample_mask(fmask, factor)
        mmask = downsample_mask(mmask, factor)
        incoming = downsample_field(incoming, factor)
    organs = tuple(
        lab
        for lab in config.organ_labels
        if np.any(fmask.labels == lab) and np.any(mmask.labels == lab)
    )
    mi_spec = _level_mi_spec(fixed, moving, fmask, config.region_labels, interp)
    return _LevelData(
        grid=fixed.grid,
        fixed=fixed,
        moving=moving,
        fmask=fmask,
        mmask=mmask,
        incoming=incoming.vectors,
        mi_spec=mi_spec,
        organ_labels=organs,
    )


def _affine_objective(ld: _LevelData, factor, center, config, interp, sink):
    pts_fine = index_grid(ld.grid.dims) * factor + (factor - 1) / 2.0
    rel = pts_fine - center
    q = rel / factor

    def objective(params):
        a = params[:9].reshape(3, 3)
        t = params[9:]
        u_level = (rel @ a.T + t - rel) / factor
        total = DisplacementField(ld.grid, ld.incoming + u_level)
        bd, gfield = composite_loss_and_grad(
            ld.fixed, ld.moving, total, ld.fmask, ld.mmask,
            ld.organ_labels, config.weights, ld.mi_spec, interp,
        )
        g = gfield.vectors
        ga = np.einsum("xyzi,xyzj->ij", g, q)
        gt = g.sum(axis=(0, 1, 2)) / factor
        sink["last"] = bd
        return bd.total, np.concatenate([ga.ravel(), gt])

    return objective


def _field_objective(ld: _LevelData, config, interp, sink):
    def objective(u):
        total = DisplacementField(ld.grid, ld.incoming + u)
        bd, gfield = composite_loss_and_grad(
            ld.fixed, ld.moving, total, ld.fmask, ld.mmask,
            ld.organ_labels, config.weights, ld.mi_spec, interp,
        )
        sink["last"] = bd
        return bd.total, gfield.vectors

    return objective


def _affine_orientation_ok(params) -> bool:
    return float(np.linalg.det(np.asarray(params)[:9].reshape(3, 3))) > 0.0


def _smoothing_filter(sigma: float):
    def smooth(delta):
        return gaussian_filter(delta, sigma=(sigma, sigma, sigma, 0.0))

    return smooth


_CLIP_FLOOR_FRACTION = 0.1


def _field_update_filter(step_voxels: float, floor: float, sigma: float):
    """Per-voxel soft clipping of a raw-gradient update, then smoothing.

    A voxel whose gradient magnitude dominates the level moves about
    ``step_voxels`` per iteration; one with magnitude far below ``floor``
    moves proportionally to its own gradient and therefore stays put when
    the loss cannot see it.  ``floor`` is a fixed fraction of the largest
    per-voxel gradient magnitude at the level's zero initializer, so steps
    shrink as optimization converges instead of staying scale-free."""

    def apply(delta):
        mag = np.sqrt((delta**2).sum(axis=-1, keepdims=True))
        out = delta * (step_voxels / (mag + floor))
        if sigma > 0:
            out = gaussian_filter(out, sigma=(sigma, sigma, sigma, 0.0))
        return out

    return apply


_IDENTITY_12 = np.array([1.0, 0, 0, 0, 1.0, 0, 0, 0, 1.0, 0, 0, 0])


def run_stage(
    fixed: Volume3D,
    moving: Volume3D,
    fixed_mask: LabelMask,
    moving_mask: LabelMask,
    incoming: DisplacementField,
    config: StageConfig,
    method: str = "adam",
) -> StageResult:
    """Optimize one stage on top of the frozen ``incoming`` field.

    ``method`` selects the optimizer for affine parameters.  Dense-field
    stages always run gradient descent through a per-voxel soft-clipping
    update filter (see _field_update_filter), which caps the per-iteration
    motion near ``step_size`` voxels while keeping voxels the loss cannot
    see stationary.
    """
    for other, what in (
        (moving, "fixed and moving volumes"),
        (fixed_mask, "fixed volume and fixed mask"),
        (moving_mask, "fixed volume and moving mask"),
        (incoming, "fixed volume and incoming field"),
    ):
        check_same_grid(fixed, other, what)
    interp = InterpSpec()
    factors = _pyramid_factors(fixed.grid.dims, config.pyramid_levels)
    level_data = [
        _build_level(fixed, moving, fixed_mask, moving_mask, incoming, f, config, interp)
        for f in factors
    ]
    center = (np.array(fixed.grid.dims, dtype=float) - 1.0) / 2.0
    sink: dict = {}
    levels = []
    for k, (factor, ld) in enumerate(zip(factors, level_data)):
        override = None
        filter_override = None
        if config.kind == "affine":
            objective = _affine_objective(ld, factor, center, config, interp, sink)
            fresh = _IDENTITY_12.copy()
            prolong = (lambda p: p) if k + 1 < len(factors) else None
        else:
            objective = _field_objective(ld, config, interp, sink)
            fresh = np.zeros(ld.grid.dims + (3,))
            if k + 1 < len(factors):
                src_grid, dst_grid = ld.grid, level_data[k + 1].grid
                prolong = (
                    lambda u, s=src_grid, d=dst_grid: upsample_field(
                        DisplacementField(s, u), d
                    ).vectors
                )
            else:
                prolong = None
            # Dense fields run gradient descent with a per-voxel soft clip:
            # the update filter turns the raw gradient into displacements of
            # at most ~step_size voxels, scaled against the level's own
            # gradient magnitude (see _field_update_filter).
            _, g0 = objective(fresh)
            scale = float(np.sqrt((g0**2).sum(axis=-1)).max())
            if scale > 0 and np.isfinite(scale):
                override = OptimizerSpec(
                    method="gradient_descent",
                    step_size=1.0,  # the filter sets the real step
                    max_iterations=config.iterations_per_level,
                )
                filter_override = _field_update_filter(
                    config.step_size,
                    _CLIP_FLOOR_FRACTION * scale,
                    config.field_smoothing_sigma,
                )
        levels.append(
            PyramidLevel(
                objective=objective,
                fresh_init=fresh,
                prolong=prolong,
                spec_override=override,
                update_filter_override=filter_override,
            )
        )

    finest = len(levels) - 1
    breakdown_log: list[LossBreakdown] = []

    def record(level, iteration, loss):
        if level == finest:
            breakdown_log.append(sink["last"])

    opt_spec = OptimizerSpec(
        method=method,
        step_size=config.step_size,
        max_iterations=config.iterations_per_level,
    )
    accept = _affine_orientation_ok if config.kind == "affine" else None
    smoother = (
        _smoothing_filter(config.field_smoothing_sigma)
        if config.kind == "deformable" and config.field_smoothing_sigma > 0
        else None
    )
    try:
        outcome = minimize_pyramid(
            levels,
            levels[0].fresh_init,
            opt_spec,
            accept_test=accept,
            update_filter=smoother,
            callback=record,
        )
    except ValueError as err:
        if "non-finite" in str(err):
            # The stage's objective was already non-finite at its start.
            raise StageAbortError(config.name, iteration=0) from err
        raise
    if outcome.stop_reason == "nan_abort":
        raise StageAbortError(config.name, iteration=len(outcome.trace))

    # Best-so-far view of the finest-level breakdowns: monotone by construction.
    loss_trace = []
    best = None
    for bd in breakdown_log:
        if best is None or bd.total < best.total:
            best = bd
        loss_trace.append(best)

    if config.kind == "affine":
        a_c = outcome.final_params[:9].reshape(3, 3)
        t_c = outcome.final_params[9:]
        params = AffineParams.from_parts(a_c, center + t_c - a_c @ center)
        stage_field = affine_to_field(params, fixed.grid)
    else:
        params = None
        stage_field = DisplacementField(fixed.grid, outcome.final_params)
    return StageResult(
        name=config.name,
        field=stage_field,
        affine=params,
        loss_trace=tuple(loss_trace),
        cumulative_field=add_fields(incoming, stage_field),
    )


def run_cascade(
    fixed: Volume3D,
    moving: Volume3D,
    fixed_mask: LabelMask,
    moving_mask: LabelMask,
    plan: CascadePlan,
    method: str = "adam",
) -> list:
    """Run all stages of ``plan`` in order; returns their StageResults.

    A stage failure raises StageAbortError with the completed stages
    attached as ``partial_results``.
    """
    results: list[StageResult] = []
    if not plan.stages:
        return results
    if plan.combine == "sum_fields":
        cumulative = zero_field(fixed.grid)
        for config in plan.stages:
            try:
                res = run_stage(
                    fixed, moving, fixed_mask, moving_mask, cumulative, config, method
                )
            except StageAbortError as err:
                err.partial_results = tuple(results)
                raise
            results.append(res)
            cumulative = res.cumulative_field
    else:
        current_vol, current_mask = moving, moving_mask
        cumulative = None
        zero = zero_field(fixed.grid)
        for config in plan.stages:
            try:
                res = run_stage(
                    fixed, current_vol, fixed_mask, current_mask, zero, config, method
                )
            except StageAbortError as err:
                err.partial_results = tuple(results)
                raise
            phi = (
                res.field
                if cumulative is None
                else compose_fields(cumulative, res.field)
            )
            res = replace(res, cumulative_field=phi)
            current_vol = warp_volume(current_vol, res.field)
            current_mask = warp_mask(current_mask, res.field)
            results.append(res)
            cumulative = phi
    return results


def total_field(results) -> DisplacementField:
    """Per-voxel sum of all stage fields (the total deformation)."""
    results = list(results)
    if not results:
        raise ValueError("no stage results to sum")
    total = results[0].field
    for res in results[1:]:
        total = add_fields(total, res.field)
    return total


def compose_fields(prev: DisplacementField, new: DisplacementField) -> DisplacementField:
    """Functional composition phi(p) = new(p) + prev(p + new(p)).

    Warping with the result equals warping with ``prev`` then with ``new``
    (up to interpolation error); used by the compose_warps diagnostic mode.
    """
    check_same_grid(prev, new, "composed fields")
    pos = index_grid(new.grid.dims) + new.vectors
    carried = np.stack(
        [sample_trilinear(prev.vectors[..., c], pos, "border") for c in range(3)],
        axis=-1,
    )
    return DisplacementField(new.grid, new.vectors + carried)
