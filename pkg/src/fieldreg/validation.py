"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


class GridMismatchError(ValueError):
    """Two objects that must live on the same voxel grid do not."""


class NonFiniteDataError(ValueError):
    """An array that must be finite contains NaN or Inf."""


def require_finite(arr: np.ndarray, name: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteDataError(f"{name} contains NaN or Inf values")


def grids_match(a, b, *, rtol: float = 1e-9, atol: float = 1e-9) -> bool:
    """Exact dims, spacing/origin equal up to floating-point noise."""
    if a.dims != b.dims:
        return False
    return bool(
        np.allclose(a.spacing, b.spacing, rtol=rtol, atol=atol)
        and np.allclose(a.origin, b.origin, rtol=rtol, atol=atol)
    )


def check_same_grid(a, b, what: str = "operands") -> None:
    if not grids_match(a.grid, b.grid):
        raise GridMismatchError(
            f"{what} must share one grid: {a.grid.dims} spacing {a.grid.spacing} "
            f"vs {b.grid.dims} spacing {b.grid.spacing}"
        )
