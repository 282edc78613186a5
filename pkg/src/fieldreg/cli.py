"""Command-line surface: ``fieldreg`` with subcommands ``phantom``,
``register``, ``evaluate``, ``preprocess``, and ``cohort``.

Exit codes: 0 success, 1 cohort finished with failed pairs, 2 usage or
configuration error, 3 numerical abort inside a registration stage.

Cascade plans are INI documents: an optional ``[cascade]`` section
(``combine = sum_fields | compose_warps``) followed by one
``[stage:NAME]`` section per stage in execution order; ``--plan default``
selects the built-in four-stage plan.  Manifests are plain ``key=value``
lines.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cascade import (
    CascadePlan,
    StageAbortError,
    StageConfig,
    default_plan,
    run_cascade,
)
from .grid import LossWeights, zero_field
from .metrics import (
    CSV_HEADER,
    PairMetrics,
    aggregate_report,
    combine_reports,
    evaluate_pair,
)
from .nifti import read_field, read_mask, read_volume, write_field, write_mask, write_volume
from .phantom import PhantomSpec, generate_phantom
from .preprocess import PreprocessSpec, apply_chain, resample_mask_to, resample_to
from .warp import warp_mask, warp_volume

_DEFAULT_ORGANS = "lung,liver,kidney,pancreas"


@dataclass(frozen=True)
class RunConfig:
    """Everything one registration run needs: input paths, the plan, and
    where to write."""

    fixed: Path
    moving: Path
    fixed_mask: Path
    moving_mask: Path
    plan: CascadePlan
    out_dir: Path
    preprocess: PreprocessSpec | None = None
    seed: int = 0
    organs: tuple = field(default_factory=tuple)

    def __post_init__(self):
        for what in ("fixed", "moving", "fixed_mask", "moving_mask"):
            path = getattr(self, what)
            if not Path(path).exists():
                raise FileNotFoundError(f"{what} input not found: {path}")


# ---------------------------------------------------------------------------
# plan files


_STAGE_KEYS = {
    "kind",
    "region_labels",
    "organ_labels",
    "alpha",
    "lambda",
    "beta",
    "pyramid_levels",
    "iterations_per_level",
    "step_size",
    "field_smoothing_sigma",
}


def _parse_int_list(text: str):
    text = text.strip()
    if not text:
        return ()
    return tuple(int(tok) for tok in text.replace(",", " ").split())


def parse_plan(text: str) -> CascadePlan:
    """Parse an INI plan document into a CascadePlan."""
    parser = configparser.ConfigParser()
    parser.read_string(text)
    combine = "sum_fields"
    stages = []
    for section in parser.sections():
        if section == "cascade":
            combine = parser.get(section, "combine", fallback="sum_fields").strip()
            extra = set(parser.options(section)) - {"combine"}
            if extra:
                raise ValueError(f"unknown keys in [cascade]: {sorted(extra)}")
            continue
        if not section.startswith("stage:"):
            raise ValueError(f"unknown plan section [{section}]")
        name = section[len("stage:"):].strip()
        opts = dict(parser.items(section))
        extra = set(opts) - _STAGE_KEYS
        if extra:
            raise ValueError(f"unknown keys in [{section}]: {sorted(extra)}")
        if "kind" not in opts:
            raise ValueError(f"[{section}] needs a 'kind' (affine or deformable)")
        defaults = StageConfig(kind=opts["kind"], name=name)
        weights = LossWeights(
            alpha=float(opts.get("alpha", defaults.weights.alpha)),
            lam=float(opts.get("lambda", defaults.weights.lam)),
            beta=float(opts.get("beta", defaults.weights.beta)),
        )
        stages.append(
            StageConfig(
                kind=opts["kind"],
                name=name,
                region_labels=frozenset(_parse_int_list(opts.get("region_labels", ""))),
                organ_labels=_parse_int_list(opts.get("organ_labels", "")),
                weights=weights,
                pyramid_levels=int(opts.get("pyramid_levels", defaults.pyramid_levels)),
                iterations_per_level=int(
                    opts.get("iterations_per_level", defaults.iterations_per_level)
                ),
                step_size=float(opts.get("step_size", defaults.step_size)),
                field_smoothing_sigma=float(
                    opts.get("field_smoothing_sigma", defaults.field_smoothing_sigma)
                ),
            )
        )
    return CascadePlan(stages=tuple(stages), combine=combine)


def format_plan(plan: CascadePlan) -> str:
    """Render a CascadePlan as an INI document ``parse_plan`` accepts."""
    lines = ["[cascade]", f"combine = {plan.combine}", ""]
    for stage in plan.stages:
        lines.append(f"[stage:{stage.name}]")
        lines.append(f"kind = {stage.kind}")
        lines.append(f"region_labels = {','.join(str(v) for v in sorted(stage.region_labels))}")
        lines.append(f"organ_labels = {','.join(str(v) for v in stage.organ_labels)}")
        lines.append(f"alpha = {stage.weights.alpha!r}")
        lines.append(f"lambda = {stage.weights.lam!r}")
        lines.append(f"beta = {stage.weights.beta!r}")
        lines.append(f"pyramid_levels = {stage.pyramid_levels}")
        lines.append(f"iterations_per_level = {stage.iterations_per_level}")
        lines.append(f"step_size = {stage.step_size!r}")
        lines.append(f"field_smoothing_sigma = {stage.field_smoothing_sigma!r}")
        lines.append("")
    return "\n".join(lines)


def load_plan(plan_arg: str) -> CascadePlan:
    if plan_arg.strip() == "default":
        return default_plan()
    return parse_plan(Path(plan_arg).read_text())


# ---------------------------------------------------------------------------
# manifests


def write_manifest(path, entries: dict):
    lines = [f"{key}={value}" for key, value in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    entries = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}: manifest line without '=': {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def parse_pairs_manifest(path):
    """One pair per line: whitespace-separated key=value tokens with keys
    fixed, moving, fixed_mask, moving_mask, and an optional name.  Relative
    paths are resolved against the manifest's directory."""
    base = Path(path).parent
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        entry = {}
        for token in line.split():
            if "=" not in token:
                raise ValueError(f"{path}:{lineno}: token without '=': {token!r}")
            key, value = token.split("=", 1)
            entry[key] = value
        missing = {"fixed", "moving", "fixed_mask", "moving_mask"} - set(entry)
        if missing:
            raise ValueError(f"{path}:{lineno}: missing keys {sorted(missing)}")
        entry.setdefault("name", f"pair{len(pairs):03d}")
        for key in ("fixed", "moving", "fixed_mask", "moving_mask"):
            entry[key] = str((base / entry[key]).resolve())
        pairs.append(entry)
    if not pairs:
        raise ValueError(f"{path}: pairs manifest lists no pairs")
    return pairs


# ---------------------------------------------------------------------------
# shared helpers


def _parse_dims(text: str):
    dims = tuple(int(tok) for tok in text.replace(",", " ").split())
    if len(dims) != 3:
        raise ValueError(f"expected three comma-separated dims, got {text!r}")
    return dims


def _parse_normalize(text: str):
    text = text.strip()
    if text == "minmax":
        return "minmax_01"
    if text.startswith("window:"):
        lo, hi = (float(tok) for tok in text[len("window:"):].split(","))
        return ("window", lo, hi)
    raise ValueError(f"unknown normalize mode {text!r}; use minmax or window:LO,HI")


def _parse_organs(text: str):
    organs = tuple(tok.strip() for tok in text.split(",") if tok.strip())
    if not organs:
        raise ValueError("organ list is empty")
    return organs


def _load_registration_inputs(fixed_path, moving_path, fixed_mask_path, moving_mask_path):
    """Read the four inputs; moving-side grids that disagree with the fixed
    grid are resampled onto it (with a warning)."""
    fixed, _ = read_volume(fixed_path)
    moving, _ = read_volume(moving_path)
    fixed_mask, _ = read_mask(fixed_mask_path)
    moving_mask, _ = read_mask(moving_mask_path)
    if fixed_mask.grid != fixed.grid:
        raise ValueError("fixed mask and fixed volume live on different grids")
    if moving_mask.grid != moving.grid:
        raise ValueError("moving mask and moving volume live on different grids")
    if moving.grid.dims != fixed.grid.dims:
        warnings.warn(
            f"moving grid {moving.grid.dims} != fixed grid {fixed.grid.dims}; "
            "resampling moving inputs onto the fixed grid",
            stacklevel=2,
        )
        moving = resample_to(moving, fixed.grid.dims)
        moving_mask = resample_mask_to(moving_mask, fixed.grid.dims)
    return fixed, moving, fixed_mask, moving_mask


def _shared_organ_labels(fixed_mask, moving_mask):
    labels = sorted(
        set(np.unique(fixed_mask.labels)) & set(np.unique(moving_mask.labels))
    )
    return tuple(int(v) for v in labels if v > 0)


def _loss_trace_csv(results) -> str:
    lines = ["stage,iteration,mi,dice,bending,total"]
    for res in results:
        for it, bd in enumerate(res.loss_trace):
            lines.append(
                f"{res.name},{it},{bd.mi:.10g},{bd.dice:.10g},"
                f"{bd.bending:.10g},{bd.total:.10g}"
            )
    return "\n".join(lines) + "\n"


def _register_to_dir(fixed, moving, fixed_mask, moving_mask, plan, out_dir, organs):
    """Run the cascade and write every artifact; returns (results, total,
    PairMetrics)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = run_cascade(fixed, moving, fixed_mask, moving_mask, plan)
    total = results[-1].cumulative_field if results else zero_field(fixed.grid)
    for res in results:
        write_field(res.field, out_dir / f"field_{res.name}")
    write_field(total, out_dir / "field_total")
    write_volume(warp_volume(moving, total), out_dir / "warped.nii.gz")
    write_mask(warp_mask(moving_mask, total), out_dir / "warped_mask.nii.gz")
    (out_dir / "loss_trace.csv").write_text(_loss_trace_csv(results))
    (out_dir / "plan.ini").write_text(format_plan(plan))
    metrics = evaluate_pair(fixed_mask, moving_mask, total, organs)
    report = {
        "method": "registered",
        "organ_dice": metrics.per_organ_dice,
        "folding_percent": metrics.folding_percent,
        "mean_abs_displacement": metrics.mean_abs_displacement,
        "stages": [res.name for res in results],
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return results, total, metrics


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args) -> int:
    spec = PhantomSpec(
        dims=_parse_dims(args.dims),
        seed=args.seed,
        deform_max_voxels=args.deform_max,
    )
    pair = generate_phantom(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(pair.fixed, out / "fixed.nii.gz")
    write_volume(pair.moving, out / "moving.nii.gz")
    write_mask(pair.fixed_mask, out / "fixed_mask.nii.gz")
    write_mask(pair.moving_mask, out / "moving_mask.nii.gz")
    write_field(pair.true_field, out / "true_field")
    affine_rows = np.array(pair.true_affine.m).reshape(3, 4)
    (out / "true_affine.txt").write_text(
        "\n".join(" ".join(repr(float(v)) for v in row) for row in affine_rows) + "\n"
    )
    organs = _parse_organs(args.organs)
    raw = evaluate_pair(
        pair.fixed_mask, pair.moving_mask, zero_field(pair.fixed.grid), organs
    )
    entries = {
        "kind": "phantom",
        "dims": ",".join(str(d) for d in spec.dims),
        "seed": spec.seed,
        "deform_max_voxels": repr(spec.deform_max_voxels),
        "deform_smoothness_sigma": repr(spec.deform_smoothness_sigma),
        "translation_range_voxels": repr(spec.affine_jitter.translation_voxels),
        "rotation_range_degrees": repr(spec.affine_jitter.rotation_degrees),
        "scale_range": repr(spec.affine_jitter.scale_fraction),
        "fixed": "fixed.nii.gz",
        "moving": "moving.nii.gz",
        "fixed_mask": "fixed_mask.nii.gz",
        "moving_mask": "moving_mask.nii.gz",
        "true_field_prefix": "true_field",
        "true_affine": "true_affine.txt",
    }
    for organ, value in raw.per_organ_dice.items():
        entries[f"raw_dice_{organ}"] = repr(value)
    write_manifest(out / "manifest.txt", entries)
    print(f"phantom pair written to {out}")
    for organ, value in raw.per_organ_dice.items():
        print(f"  raw {organ} dice: {value:.4f}")
    return 0


def cmd_register(args) -> int:
    plan = load_plan(args.plan)
    if args.combine is not None:
        mode = {"sum": "sum_fields", "compose": "compose_warps"}[args.combine]
        plan = CascadePlan(stages=plan.stages, combine=mode)
    cfg = RunConfig(
        fixed=Path(args.fixed),
        moving=Path(args.moving),
        fixed_mask=Path(args.fixed_mask),
        moving_mask=Path(args.moving_mask),
        plan=plan,
        out_dir=Path(args.out),
        seed=args.seed,
    )
    fixed, moving, fixed_mask, moving_mask = _load_registration_inputs(
        cfg.fixed, cfg.moving, cfg.fixed_mask, cfg.moving_mask
    )
    organs = _shared_organ_labels(fixed_mask, moving_mask)
    results, total, metrics = _register_to_dir(
        fixed, moving, fixed_mask, moving_mask, cfg.plan, cfg.out_dir, organs
    )
    write_manifest(
        cfg.out_dir / "manifest.txt",
        {
            "kind": "register",
            "fixed": args.fixed,
            "moving": args.moving,
            "fixed_mask": args.fixed_mask,
            "moving_mask": args.moving_mask,
            "plan": args.plan,
            "combine": plan.combine,
            "seed": args.seed,
            "stages": ",".join(res.name for res in results),
            "total_field_prefix": "field_total",
            "warped": "warped.nii.gz",
            "warped_mask": "warped_mask.nii.gz",
        },
    )
    for res in results:
        first, last = res.loss_trace[0], res.loss_trace[-1]
        print(f"stage {res.name}: loss {first.total:.6f} -> {last.total:.6f}")
    for organ, value in metrics.per_organ_dice.items():
        print(f"  {organ} dice: {value:.4f}")
    print(f"folding: {metrics.folding_percent:.4f}%")
    print(f"outputs in {cfg.out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    fixed_mask, _ = read_mask(args.fixed_mask)
    moving_mask, _ = read_mask(args.moving_mask)
    if args.field is not None:
        field = read_field(args.field)
    else:
        field = zero_field(fixed_mask.grid)
    organs = _parse_organs(args.organs)
    metrics = evaluate_pair(fixed_mask, moving_mask, field, organs)
    method = args.method or ("registered" if args.field else "raw")
    report = aggregate_report([metrics], method)
    out = Path(args.out)
    text = report.to_csv()
    if out.exists() and out.read_text().strip():
        body = text.split("\n", 1)[1]  # existing file already has the header
        with out.open("a") as handle:
            handle.write(body)
    else:
        out.write_text(text)
    sys.stdout.write(report.to_text())
    return 0


def cmd_preprocess(args) -> int:
    vol, _ = read_volume(args.infile)
    body, _ = read_mask(args.body_mask)
    spec = PreprocessSpec(
        target_dims=_parse_dims(args.target_dims),
        normalize=_parse_normalize(args.normalize),
    )
    out_vol, out_mask, info = apply_chain(vol, body, spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_volume(out_vol, out)
    base = out.name
    for ext in (".nii.gz", ".nii"):
        if base.endswith(ext):
            base = base[: -len(ext)]
            break
    mask_path = out.parent / f"{base}_mask.nii.gz"
    manifest_path = out.parent / f"{base}_manifest.txt"
    write_mask(out_mask, mask_path)
    write_manifest(
        manifest_path,
        {
            "kind": "preprocess",
            "input": args.infile,
            "body_mask": args.body_mask,
            "input_dims": ",".join(str(d) for d in info["input_dims"]),
            "crop_box": ";".join(f"{a},{b}" for a, b in info["crop_box"]),
            "normalize": args.normalize,
            "output_dims": ",".join(str(d) for d in info["output_dims"]),
            "output": out.name,
            "output_mask": mask_path.name,
        },
    )
    print(f"preprocessed volume written to {out} (dims {out_vol.grid.dims})")
    return 0


def _cohort_pair_report(entry, plan, organs, pair_dir, resume):
    """Run one cohort pair (or reload it under --resume); returns the pair's
    raw and registered PairMetrics."""
    report_path = pair_dir / "report.json"
    if resume and report_path.exists():
        saved = json.loads(report_path.read_text())
        raw = PairMetrics(
            per_organ_dice=saved["raw"]["organ_dice"],
            folding_percent=saved["raw"]["folding_percent"],
            mean_abs_displacement=saved["raw"]["mean_abs_displacement"],
        )
        registered = PairMetrics(
            per_organ_dice=saved["registered"]["organ_dice"],
            folding_percent=saved["registered"]["folding_percent"],
            mean_abs_displacement=saved["registered"]["mean_abs_displacement"],
        )
        return raw, registered
    fixed, moving, fixed_mask, moving_mask = _load_registration_inputs(
        entry["fixed"], entry["moving"], entry["fixed_mask"], entry["moving_mask"]
    )
    pair_dir.mkdir(parents=True, exist_ok=True)
    results = run_cascade(fixed, moving, fixed_mask, moving_mask, plan)
    total = results[-1].cumulative_field if results else zero_field(fixed.grid)
    write_field(total, pair_dir / "field_total")
    (pair_dir / "loss_trace.csv").write_text(_loss_trace_csv(results))
    raw = evaluate_pair(fixed_mask, moving_mask, zero_field(fixed.grid), organs)
    registered = evaluate_pair(fixed_mask, moving_mask, total, organs)
    payload = {
        "name": entry["name"],
        "raw": {
            "organ_dice": raw.per_organ_dice,
            "folding_percent": raw.folding_percent,
            "mean_abs_displacement": raw.mean_abs_displacement,
        },
        "registered": {
            "organ_dice": registered.per_organ_dice,
            "folding_percent": registered.folding_percent,
            "mean_abs_displacement": registered.mean_abs_displacement,
        },
    }
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return raw, registered


def cmd_cohort(args) -> int:
    pairs = parse_pairs_manifest(args.pairs_manifest)
    plan = load_plan(args.plan)
    organs = _parse_organs(args.organs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs_root = out / "pairs"

    def run_one(entry):
        return _cohort_pair_report(
            entry, plan, organs, pairs_root / entry["name"], args.resume
        )

    jobs = max(1, args.jobs)
    outcomes = []
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(run_one, entry) for entry in pairs]
        for entry, future in zip(pairs, futures):
            try:
                outcomes.append((entry["name"], future.result(), None))
            except Exception as err:  # record and keep going
                outcomes.append((entry["name"], None, f"{type(err).__name__}: {err}"))

    failures = [(name, msg) for name, _, msg in outcomes if msg is not None]
    successes = [metrics for _, metrics, msg in outcomes if msg is None]
    for name, msg in failures:
        print(f"pair {name} failed: {msg}", file=sys.stderr)
    if successes:
        raw_report = aggregate_report([raw for raw, _ in successes], "raw")
        reg_report = aggregate_report([reg for _, reg in successes], "registered")
        combined = combine_reports([raw_report, reg_report])
        (out / "report.csv").write_text(combined.to_csv())
        (out / "report.txt").write_text(combined.to_text())
        sys.stdout.write(combined.to_text())
        print(f"report written to {out / 'report.csv'} ({len(successes)} pairs)")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fieldreg",
        description="Staged volumetric registration: phantoms, registration, "
        "evaluation, preprocessing, cohorts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic pair with ground truth")
    p.add_argument("--dims", default="64,48,40", help="volume dims X,Y,Z")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deform-max", type=float, default=4.0,
                   help="peak ground-truth displacement in voxels")
    p.add_argument("--organs", default=_DEFAULT_ORGANS,
                   help="organs scored in the manifest's raw-Dice entries")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("register", help="register one pair with a cascade plan")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed-mask", required=True)
    p.add_argument("--moving-mask", required=True)
    p.add_argument("--plan", required=True, help="plan file, or 'default'")
    p.add_argument("--combine", choices=("sum", "compose"), default=None,
                   help="override the plan's field accumulation mode")
    p.add_argument("--seed", type=int, default=0,
                   help="recorded in the manifest; the pipeline is deterministic")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="score a pair of masks under a field")
    p.add_argument("--fixed-mask", required=True)
    p.add_argument("--moving-mask", required=True)
    p.add_argument("--field", default=None,
                   help="field prefix (as written by register); omitted = zero field")
    p.add_argument("--organs", default=_DEFAULT_ORGANS)
    p.add_argument("--method", default=None,
                   help="method column in the CSV (default: registered or raw)")
    p.add_argument("--out", required=True, help="CSV file to create or append to")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("preprocess", help="normalize, crop to body, resample")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--body-mask", required=True)
    p.add_argument("--target-dims", default="256,192,160")
    p.add_argument("--normalize", default="minmax",
                   help="minmax or window:LO,HI")
    p.add_argument("--out", required=True, help="output volume path")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("cohort", help="register and evaluate a list of pairs")
    p.add_argument("--pairs-manifest", required=True,
                   help="file with one pair per line (key=value tokens)")
    p.add_argument("--plan", required=True, help="plan file, or 'default'")
    p.add_argument("--organs", default=_DEFAULT_ORGANS)
    p.add_argument("--jobs", type=int, default=1, help="concurrent pairs")
    p.add_argument("--resume", action="store_true",
                   help="skip pairs whose report.json already exists")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_cohort)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageAbortError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, OSError, configparser.Error) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
