"""scikit-learn style estimator facade over the registration cascade.

``CascadeRegistration`` follows the fit/transform protocol: ``fit`` solves
the registration for one fixed/moving pair (instance optimization — there
is no training set), after which ``transform`` warps volumes from the
moving frame onto the fixed grid.  Parameters set in ``__init__`` are
stored untouched so ``get_params``/``set_params``/``clone`` behave as for
any scikit-learn estimator.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .cascade import CascadePlan, default_plan, run_cascade
from .grid import (
    DEFAULT_LABEL_NAMES,
    LabelMask,
    Volume3D,
    VolumeGrid,
    zero_field,
)
from .warp import warp_mask, warp_volume


def _as_volume(obj, what: str) -> Volume3D:
    if isinstance(obj, Volume3D):
        return obj
    arr = np.asarray(obj, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"{what} must be a Volume3D or a 3-D array, got shape {arr.shape}")
    return Volume3D(VolumeGrid(dims=arr.shape), arr)


def _as_mask(obj, grid, what: str) -> LabelMask:
    if obj is None:
        # No mask: treat every voxel as body so the losses see the whole volume.
        return LabelMask(grid, np.ones(grid.dims, dtype=np.int32))
    if isinstance(obj, LabelMask):
        return obj
    arr = np.asarray(obj)
    if arr.shape != grid.dims:
        raise ValueError(f"{what} shape {arr.shape} does not match volume dims {grid.dims}")
    labels = np.rint(arr).astype(np.int32)
    names = dict(DEFAULT_LABEL_NAMES)
    for value in np.unique(labels):
        names.setdefault(int(value), f"label_{int(value)}")
    return LabelMask(grid, labels, label_names=names)


class CascadeRegistration(BaseEstimator):
    """Registers a moving volume onto a fixed volume with the staged cascade.

    Parameters
    ----------
    plan : CascadePlan or None
        Stage sequence to run; None uses the standard four-stage plan.
    combine : str
        "sum_fields" (default) or the diagnostic "compose_warps" mode;
        overrides the plan's combine setting.
    method : str
        Optimizer: "adam" or "gradient_descent".
    """

    def __init__(self, plan: CascadePlan | None = None, combine: str = "sum_fields",
                 method: str = "adam"):
        self.plan = plan
        self.combine = combine
        self.method = method

    def fit(self, fixed, moving, fixed_mask=None, moving_mask=None):
        fixed = _as_volume(fixed, "fixed")
        moving = _as_volume(moving, "moving")
        fixed_mask = _as_mask(fixed_mask, fixed.grid, "fixed_mask")
        moving_mask = _as_mask(moving_mask, moving.grid, "moving_mask")
        plan = self.plan if self.plan is not None else default_plan()
        if plan.combine != self.combine:
            plan = replace(plan, combine=self.combine)
        results = run_cascade(fixed, moving, fixed_mask, moving_mask, plan,
                              method=self.method)
        self.plan_ = plan
        self.stage_results_ = tuple(results)
        # The last cumulative field is the total map in both combine modes:
        # identical to the stage-field sum in sum_fields mode, and the
        # functional composition in compose_warps mode.
        self.total_field_ = (
            results[-1].cumulative_field if results else zero_field(fixed.grid)
        )
        return self

    def _require_fitted(self):
        if not hasattr(self, "total_field_"):
            raise NotFittedError(
                "this CascadeRegistration is not fitted yet; call fit first"
            )

    def transform(self, volume) -> Volume3D:
        """Warp a volume from the moving frame onto the fixed grid."""
        self._require_fitted()
        volume = _as_volume(volume, "volume")
        return warp_volume(volume, self.total_field_)

    def transform_mask(self, mask) -> LabelMask:
        """Warp a label mask (nearest-neighbor) onto the fixed grid."""
        self._require_fitted()
        mask = _as_mask(mask, self.total_field_.grid, "mask")
        return warp_mask(mask, self.total_field_)
