"""Gradient-based minimization for stage parameters.

``minimize`` runs Adam or plain gradient descent on an arbitrary ndarray of
parameters (a 12-vector of affine coefficients or a dense field) and tracks
the best parameters seen, so the returned loss never exceeds the initial
loss even when late iterations overshoot.  ``minimize_pyramid`` chains
per-level objectives coarse to fine, prolonging parameters between levels
and falling back to each level's fresh initializer whenever the prolonged
parameters score worse — the final loss therefore never exceeds the fresh
initializer's loss at the finest level.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_MAX_HALVINGS = 10

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class OptimizerSpec:
    """Settings for a single optimization run."""

    method: str = "adam"
    step_size: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    epsilon: float = 1e-8
    max_iterations: int = 100
    convergence_tol: float = 1e-5
    patience: int = 10
    seed: int = 0  # reserved; the optimizer itself draws no random numbers

    def __post_init__(self):
        if self.method not in ("adam", "gradient_descent"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass(frozen=True)
class OptimizeOutcome:
    """Result of a run: best parameters, per-iteration loss trace, and why
    the run stopped ("converged", "max_iter", or "nan_abort")."""

    final_params: np.ndarray
    trace: tuple
    stop_reason: str
    best_loss: float


@dataclass(frozen=True)
class PyramidLevel:
    """One resolution level: its objective, a fresh initializer used as a
    safeguard, the prolongation mapping this level's parameters to the
    next (finer) level (None at the finest level), and an optional
    optimizer-spec override for the level (e.g. a step size rescaled to
    the level's gradient magnitude).  ``update_filter_override`` replaces
    the shared update filter for this level; level-built filters can bake
    in quantities measured at the level's own scale."""

    objective: Objective
    fresh_init: np.ndarray
    prolong: Callable[[np.ndarray], np.ndarray] | None = None
    spec_override: "OptimizerSpec | None" = None
    update_filter_override: Callable[[np.ndarray], np.ndarray] | None = None


def _finite(loss: float, grad: np.ndarray) -> bool:
    return bool(np.isfinite(loss)) and bool(np.all(np.isfinite(grad)))


def minimize(
    objective: Objective,
    init: np.ndarray,
    spec: OptimizerSpec = OptimizerSpec(),
    accept_test: Callable[[np.ndarray], bool] | None = None,
    update_filter: Callable[[np.ndarray], np.ndarray] | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> OptimizeOutcome:
    """Minimize ``objective`` starting from ``init``.

    ``objective(params) -> (loss, grad)``.  ``accept_test`` guards invalid
    regions (e.g. orientation flips): a failing step is halved up to 10
    times and skipped if it still fails.  ``update_filter`` post-processes
    the raw update (e.g. Gaussian smoothing of a field step).  ``callback``
    receives (iteration, loss) for every recorded trace entry.  The run is
    deterministic: no random numbers are drawn.
    """
    params = np.array(init, dtype=np.float64)
    loss, grad = objective(params)
    if not _finite(loss, grad):
        raise ValueError("objective is non-finite at the initial parameters")
    best = params.copy()
    best_loss = loss
    trace = [(0, loss)]
    if callback is not None:
        callback(0, loss)

    m = np.zeros_like(params)
    v = np.zeros_like(params)
    streak = 0
    stop = "max_iter"
    for it in range(1, spec.max_iterations + 1):
        if spec.method == "adam":
            m = spec.adam_beta1 * m + (1.0 - spec.adam_beta1) * grad
            v = spec.adam_beta2 * v + (1.0 - spec.adam_beta2) * grad**2
            m_hat = m / (1.0 - spec.adam_beta1**it)
            v_hat = v / (1.0 - spec.adam_beta2**it)
            delta = spec.step_size * m_hat / (np.sqrt(v_hat) + spec.epsilon)
        else:
            delta = spec.step_size * grad
        if update_filter is not None:
            delta = update_filter(delta)
        proposal = params - delta
        if accept_test is not None and not accept_test(proposal):
            for _ in range(_MAX_HALVINGS):
                delta = delta / 2.0
                proposal = params - delta
                if accept_test(proposal):
                    break
            else:
                proposal = params  # skip the step entirely
        prev_loss = loss
        params = proposal
        loss, grad = objective(params)
        if not _finite(loss, grad):
            stop = "nan_abort"
            break
        trace.append((it, loss))
        if callback is not None:
            callback(it, loss)
        if loss < best_loss:
            best_loss = loss
            best = params.copy()
        rel_change = abs(loss - prev_loss) / max(abs(prev_loss), 1e-12)
        streak = streak + 1 if rel_change < spec.convergence_tol else 0
        if streak >= spec.patience:
            stop = "converged"
            break
    return OptimizeOutcome(
        final_params=best, trace=tuple(trace), stop_reason=stop, best_loss=best_loss
    )


def minimize_pyramid(
    levels: Sequence[PyramidLevel],
    init: np.ndarray,
    spec: OptimizerSpec = OptimizerSpec(),
    accept_test: Callable[[np.ndarray], bool] | None = None,
    update_filter: Callable[[np.ndarray], np.ndarray] | None = None,
    callback: Callable[[int, int, float], None] | None = None,
) -> OptimizeOutcome:
    """Coarse-to-fine minimization over ``levels`` (ordered coarse first).

    ``init`` seeds the coarsest level.  Between levels the previous result
    is prolonged; if the level's ``fresh_init`` scores a lower loss than
    the prolonged parameters, optimization restarts from it instead.
    ``callback`` receives (level, iteration, loss).  The returned trace is
    the concatenation of per-level traces with globally increasing
    iteration numbers.
    """
    if not levels:
        raise ValueError("at least one pyramid level is required")
    params = np.array(init, dtype=np.float64)
    combined = []
    offset = 0
    outcome = None
    for k, level in enumerate(levels):
        if k > 0:
            prolong = levels[k - 1].prolong
            if prolong is not None:
                params = np.asarray(prolong(params), dtype=np.float64)
            carried_loss, _ = level.objective(params)
            fresh_loss, _ = level.objective(level.fresh_init)
            if not np.isfinite(carried_loss) or fresh_loss < carried_loss:
                params = np.array(level.fresh_init, dtype=np.float64)
        level_cb = None
        if callback is not None:
            level_cb = (lambda lv: lambda it, loss: callback(lv, it, loss))(k)
        outcome = minimize(
            level.objective,
            params,
            level.spec_override if level.spec_override is not None else spec,
            accept_test=accept_test,
            update_filter=(
                level.update_filter_override
                if level.update_filter_override is not None
                else update_filter
            ),
            callback=level_cb,
        )
        params = outcome.final_params
        combined.extend((offset + it, loss) for it, loss in outcome.trace)
        offset += len(outcome.trace)
        if outcome.stop_reason == "nan_abort":
            break
    return OptimizeOutcome(
        final_params=params,
        trace=tuple(combined),
        stop_reason=outcome.stop_reason,
        best_loss=outcome.best_loss,
    )
