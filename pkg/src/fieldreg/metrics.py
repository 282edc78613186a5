"""Evaluation metrics: per-organ hard Dice, Jacobian folding, and cohort
mean/std reports.

Hard Dice operates on nearest-warped label masks (the evaluation-facing
counterpart of the soft Dice training term).  Folding is the percentage of
voxels where det(I + grad u) < 0, with central differences on interior
voxels and one-sided differences on the boundary (exact for linear fields),
counted over all voxels so the denominator is unambiguous.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import DisplacementField, LabelMask, Volume3D
from .validation import check_same_grid
from .warp import warp_mask

CSV_HEADER = "method,organ,mean_dice,std_dice,folding_mean,folding_std,n"


@dataclass(frozen=True)
class PairMetrics:
    """Evaluation of one registered pair."""

    per_organ_dice: dict
    folding_percent: float
    mean_abs_displacement: float

    def __post_init__(self):
        for organ, value in self.per_organ_dice.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"Dice for {organ!r} outside [0, 1]: {value}")
        if not 0.0 <= self.folding_percent <= 100.0:
            raise ValueError(f"folding percent outside [0, 100]: {self.folding_percent}")
        object.__setattr__(self, "per_organ_dice", dict(self.per_organ_dice))


@dataclass(frozen=True)
class MethodSummary:
    """Mean/std statistics of one method over a cohort of pairs."""

    method: str
    organ_dice: dict  # organ -> (mean, std)
    folding: tuple  # (mean, std)
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("a summary needs at least one pair")
        for organ, (_, std) in self.organ_dice.items():
            if std < 0:
                raise ValueError(f"negative std for {organ!r}")
        object.__setattr__(self, "organ_dice", dict(self.organ_dice))


@dataclass(frozen=True)
class CohortReport:
    """One row per method, Table-style: per-organ mean +/- std and folding."""

    rows: tuple
    n_pairs: int

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ValueError("a report needs at least one pair")
        object.__setattr__(self, "rows", tuple(self.rows))

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for row in self.rows:
            for organ in sorted(row.organ_dice):
                mean, std = row.organ_dice[organ]
                fm, fs = row.folding
                lines.append(
                    f"{row.method},{organ},{mean:.9f},{std:.9f},{fm:.9f},{fs:.9f},{row.n}"
                )
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        organs = sorted({o for row in self.rows for o in row.organ_dice})
        headers = ["method"] + [f"{o} dice" for o in organs] + ["folding %"]
        table = [headers]
        for row in self.rows:
            cells = [row.method]
            for organ in organs:
                stat = row.organ_dice.get(organ)
                cells.append("-" if stat is None else f"{stat[0]:.4f} ± {stat[1]:.4f}")
            cells.append(f"{row.folding[0]:.4f} ± {row.folding[1]:.4f}")
            table.append(cells)
        widths = [max(len(r[c]) for r in table) for c in range(len(headers))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in table]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def hard_dice(a: LabelMask, b: LabelMask, label: int) -> float:
    """2|A∩B| / (|A|+|B|) for one label; 1.0 when both empty, 0.0 when
    exactly one is empty."""
    check_same_grid(a, b, "masks")
    in_a = a.labels == label
    in_b = b.labels == label
    na = int(in_a.sum())
    nb = int(in_b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * int(np.logical_and(in_a, in_b).sum()) / (na + nb)


def jacobian_determinant(field: DisplacementField) -> Volume3D:
    """det(I + grad u) per voxel; central differences on the interior,
    one-sided at the boundary (both exact for linear fields)."""
    if min(field.grid.dims) < 3:
        raise ValueError(f"Jacobian needs >= 3 voxels per axis, got {field.grid.dims}")
    u = field.vectors
    # j[i][k] = d(p_i + u_i)/d p_k
    j = [[None] * 3 for _ in range(3)]
    for i in range(3):
        grads = np.gradient(u[..., i], axis=(0, 1, 2))
        for k in range(3):
            j[i][k] = grads[k] + (1.0 if i == k else 0.0)
    det = (
        j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
    )
    return Volume3D(field.grid, det, intensity_unit="jacobian")


def folding_percentage(field: DisplacementField) -> float:
    """Percentage of voxels whose Jacobian determinant is negative."""
    det = jacobian_determinant(field).data
    return 100.0 * float(np.count_nonzero(det < 0.0)) / det.size


def evaluate_pair(
    fixed_mask: LabelMask,
    moving_mask: LabelMask,
    field: DisplacementField,
    organs,
) -> PairMetrics:
    """Warp the moving mask (nearest) and score it against the fixed mask.

    ``organs`` lists labels (ints) or label names; Dice keys in the result
    are the label names.
    """
    check_same_grid(fixed_mask, field, "fixed mask and field")
    check_same_grid(moving_mask, field, "moving mask and field")
    labels = [resolve_organ_label(fixed_mask, organ) for organ in organs]
    warped = warp_mask(moving_mask, field)
    dice = {
        fixed_mask.label_names[label]: hard_dice(fixed_mask, warped, label)
        for label in labels
    }
    return PairMetrics(
        per_organ_dice=dice,
        folding_percent=folding_percentage(field),
        mean_abs_displacement=float(field.magnitudes().mean()),
    )


def resolve_organ_label(mask: LabelMask, organ) -> int:
    """Accept an organ as a numeric label or a label name."""
    if isinstance(organ, str) and not organ.lstrip("-").isdigit():
        for label, name in mask.label_names.items():
            if name == organ:
                return label
        raise ValueError(
            f"unknown organ {organ!r}; mask defines {sorted(mask.label_names.values())}"
        )
    label = int(organ)
    if label not in mask.label_names:
        raise ValueError(
            f"unknown organ label {label}; mask defines {sorted(mask.label_names)}"
        )
    return label


def aggregate_report(pair_metrics, method_name: str) -> CohortReport:
    """Mean and population standard deviation over pairs, one report row."""
    pair_metrics = list(pair_metrics)
    if not pair_metrics:
        raise ValueError("cannot aggregate an empty list of pair metrics")
    organs = sorted(pair_metrics[0].per_organ_dice)
    for pm in pair_metrics:
        if sorted(pm.per_organ_dice) != organs:
            raise ValueError("pairs report inconsistent organ sets")
    organ_dice = {}
    for organ in organs:
        values = np.array([pm.per_organ_dice[organ] for pm in pair_metrics])
        organ_dice[organ] = (float(values.mean()), float(values.std()))
    folding = np.array([pm.folding_percent for pm in pair_metrics])
    row = MethodSummary(
        method=method_name,
        organ_dice=organ_dice,
        folding=(float(folding.mean()), float(folding.std())),
        n=len(pair_metrics),
    )
    return CohortReport(rows=(row,), n_pairs=len(pair_metrics))


def combine_reports(reports) -> CohortReport:
    """Stack rows of several reports into one table."""
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to combine")
    rows = tuple(row for rep in reports for row in rep.rows)
    return CohortReport(rows=rows, n_pairs=max(rep.n_pairs for rep in reports))
