"""Command-line front end: prepare, experiment, disparity, audit."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

import numpy as np
import pandas as pd

from . import audit as aud
from .data import (
    BROWARD_REQUIRED,
    CANONICAL_COLUMNS,
    BetaPopulation,
    Cohort,
    CohortError,
    filter_broward,
    load_cohort,
    read_canonical,
    rejected_rows,
    sample_beta_population,
    write_cohort,
)
from .eval import run_experiment
from .optimize import optimize
from .risk import Bins, calibration_curve, default_bins, fit_risk_model, predict_cohort
from .rules import (
    CONDITIONAL_STATISTICAL_PARITY,
    CONSTRAINT_KINDS,
    GROUP_STRATUM,
    UNCONSTRAINED,
    ConstraintSpec,
    apply_rule,
    detention_rate,
    false_positive_rate,
)

log = logging.getLogger("fairthresh")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def f17(x) -> str:
    return f"{float(x):.17g}"


def f4(x) -> str:
    return f"{float(x):.4g}"


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fairthresh", description="Fairness-constrained detention thresholds.")
    sub = p.add_subparsers(dest="command", required=True)

    def shared(sp, needs_input=True):
        sp.add_argument("--input", required=needs_input, help="input CSV")
        sp.add_argument("--schema", help="schema mapping file (key = column lines)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--alpha", type=float, default=0.3, help="detention budget")
        sp.add_argument("--delta", type=float, default=0.0, help="constraint slack")
        sp.add_argument("--constraints", default=",".join(CONSTRAINT_KINDS),
                        help="comma-separated constraint kinds")
        sp.add_argument("--splits", type=int, default=100)
        sp.add_argument("--train-fraction", type=float, default=0.7)
        sp.add_argument("--svg", action="store_true", help="also write simple SVG charts")
        sp.add_argument("--label", choices=sorted(BROWARD_REQUIRED), default="violent",
                        help="outcome label when reading a raw Broward extract")

    sp = sub.add_parser("prepare", help="filter a raw extract into a canonical cohort file")
    shared(sp)

    sp = sub.add_parser("experiment", help="repeated train/test cost-of-fairness experiment")
    shared(sp)
    sp.add_argument("--exclude-vendor-score", action="store_true", help="drop vendor_score from model features")
    sp.add_argument("--l1", type=float, default=None, help="fixed L1 strength (default: cross-validated)")
    sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("disparity", help="single-threshold disparities and risk densities")
    shared(sp, needs_input=False)
    sp.add_argument("--beta", action="append", metavar="A,B", help="synthetic group Beta(A,B); repeat per group")
    sp.add_argument("--n", type=int, default=100_000, help="synthetic sample size")
    sp.add_argument("--score-column", help="use this feature as the risk score instead of a fitted model")

    sp = sub.add_parser("audit", help="calibration audit and redlining construction")
    shared(sp, needs_input=False)
    sp.add_argument("--synthetic", action="store_true", help="two identical Beta(2,5) groups")
    sp.add_argument("--n", type=int, default=50_000, help="synthetic sample size")
    sp.add_argument("--score-column", help="score feature to audit (default vendor_score, else fitted model)")
    sp.add_argument("--noise", type=float, default=0.5)
    sp.add_argument("--noise-scale", choices=aud.NOISE_SCALES, default="logodds")
    sp.add_argument("--bins", default="auto", help="'auto', 'levels', or a number of equal-width bins")
    sp.add_argument("--target-group", help="group whose scores are redlined (default: first group)")
    sp.add_argument("--quantile", type=float, default=0.7, help="threshold quantile of the original scores")
    return p


def parse_constraints(text: str, delta: float, alpha: float, stratifier: str | None) -> list[ConstraintSpec]:
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    unknown = [k for k in kinds if k not in CONSTRAINT_KINDS]
    if unknown or not kinds:
        raise UsageError(f"unknown constraint(s) {unknown}; choose from {', '.join(CONSTRAINT_KINDS)}")
    if UNCONSTRAINED not in kinds:
        kinds.insert(0, UNCONSTRAINED)
    specs = []
    for k in dict.fromkeys(kinds):
        strat = stratifier if k == CONDITIONAL_STATISTICAL_PARITY else None
        if k == CONDITIONAL_STATISTICAL_PARITY and strat is None:
            raise UsageError("conditional statistical parity needs a cohort with strata")
        specs.append(ConstraintSpec(k, alpha, 0.0 if k == UNCONSTRAINED else delta, strat))
    return specs


def validate(args) -> None:
    if not 0 < args.alpha < 1:
        raise UsageError("--alpha must lie in (0,1)")
    if args.delta < 0:
        raise UsageError("--delta must be nonnegative")
    if args.splits < 1:
        raise UsageError("--splits must be at least 1")
    if not 0 < args.train_fraction < 1:
        raise UsageError("--train-fraction must lie in (0,1)")
    if args.input is not None and not os.path.isfile(args.input):
        raise UsageError(f"--input {args.input} does not exist")
    if args.schema is not None and not os.path.isfile(args.schema):
        raise UsageError(f"--schema {args.schema} does not exist")
    if args.command == "experiment" and args.workers < 1:
        raise UsageError("--workers must be at least 1")
    if args.command == "disparity":
        if (args.input is None) == (args.beta is None):
            raise UsageError("disparity needs exactly one of --input or --beta")
        if args.beta is not None:
            args.beta_params = [parse_beta(b) for b in args.beta]
        if args.n < 1:
            raise UsageError("--n must be positive")
    if args.command == "audit":
        if (args.input is None) == (not args.synthetic):
            raise UsageError("audit needs exactly one of --input or --synthetic")
        if not args.noise > 0:
            raise UsageError("--noise must be positive")
        if not 0 < args.quantile < 1:
            raise UsageError("--quantile must lie in (0,1)")
        if args.bins not in ("auto", "levels"):
            try:
                k = int(args.bins)
            except ValueError:
                raise UsageError("--bins must be 'auto', 'levels' or an integer") from None
            if k < 1:
                raise UsageError("--bins must be positive")
        if args.n < 2:
            raise UsageError("--n must be at least 2")


def parse_beta(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--beta expects A,B, got {text!r}") from None
    if not (a > 0 and b > 0):
        raise UsageError(f"--beta parameters must be positive, got {text!r}")
    return a, b


def resolved_config(args) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("beta_params",)}
    return cfg


# ---------------------------------------------------------------------------
# input handling


def read_any_cohort(path: str, schema: str | None, label: str = "violent") -> tuple[Cohort, list[str]]:
    """Load a cohort from a canonical file, a schema-mapped CSV, or a raw
    Broward extract; also return filter-count log lines."""
    if schema is not None:
        cohort = load_cohort(path, schema)
        rejected = rejected_rows(cohort)
        return cohort, [f"input_rows,{len(cohort) + len(rejected)}", f"drop:rejected_row,{len(rejected)}",
                        f"output_rows,{len(cohort)}"]
    header = pd.read_csv(path, nrows=0).columns.tolist()
    if header[:4] == list(CANONICAL_COLUMNS):
        cohort = read_canonical(path)
        return cohort, [f"input_rows,{len(cohort)}", f"output_rows,{len(cohort)}"]
    if set(BROWARD_REQUIRED[label]) <= set(header):
        from .data import BROWARD_SCHEMA, cohort_from_frame

        df, report = filter_broward(pd.read_csv(path), label=label)
        if df.empty:
            raise CohortError("empty result")
        return cohort_from_frame(df, BROWARD_SCHEMA, group_set=("black", "white")), report.lines()
    raise CohortError(f"{path}: not a canonical cohort or a recognised raw extract; pass --schema")


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args) -> dict[str, str]:
    cohort, lines = read_any_cohort(args.input, args.schema, args.label)
    files = {}
    files["cohort.csv"] = _render_cohort(cohort)
    files["filter_counts.csv"] = "clause,count\n" + "\n".join(lines) + "\n"
    return files


def _render_cohort(cohort: Cohort) -> str:
    import io

    buf = io.StringIO()
    write_cohort(cohort, buf)
    return buf.getvalue()


def cmd_experiment(args) -> dict[str, str]:
    cohort, _ = read_any_cohort(args.input, args.schema, args.label)
    specs = parse_constraints(args.constraints, args.delta, args.alpha, cohort.stratifier)
    report = run_experiment(
        cohort, specs, args.splits, args.train_fraction, args.alpha, args.seed,
        l1_strength=args.l1, exclude_vendor=args.exclude_vendor_score, workers=args.workers,
    )
    files = {"table1.csv": report.csv_text(), "splits.csv": report.splits_csv_text(), "table1.txt": report.table()}
    if args.svg:
        labels = [r.label for r in report.rows]
        files["table1.svg"] = svg_bars(
            "Low-risk share of detainees", labels, {"low_risk_share": [r.low_risk_share for r in report.rows]}
        )
    return files


def _scores_for(cohort: Cohort, score_column: str | None, seed: int) -> tuple[np.ndarray, str]:
    if score_column is not None:
        return cohort.column(score_column), score_column
    if cohort.feature_names == ("risk",):
        return cohort.column("risk"), "risk"
    model = fit_risk_model(cohort, seed=seed)
    return predict_cohort(model, cohort), "model"


def cmd_disparity(args) -> dict[str, str]:
    synthetic = args.beta is not None
    if synthetic:
        names = [f"g{i + 1}" for i in range(len(args.beta_params))]
        k = len(names)
        spec = BetaPopulation(dict(zip(names, args.beta_params)), {g: 1.0 / k for g in names}, args.n)
        cohort = sample_beta_population(spec, args.seed)
    else:
        cohort, _ = read_any_cohort(args.input, args.schema, args.label)
    scores, source = _scores_for(cohort, args.score_column, args.seed)
    if np.any(scores < 0) or np.any(scores > 1):
        raise CohortError(f"score column {source!r} is not a probability")
    res = optimize(scores, cohort, ConstraintSpec(UNCONSTRAINED, args.alpha), tie_seed=args.seed)
    dec = apply_rule(res.rule, cohort, scores)

    rows = ["panel,group,stratum,value"]
    for g, v in detention_rate(dec).items():
        rows.append(f"detention_rate,{g},,{f17(v)}")
    for g, v in false_positive_rate(dec, "empirical").items():
        rows.append(f"false_positive_rate,{g},,{f17(v)}")
    if not synthetic and cohort.strata is not None:
        for key, v in detention_rate(dec, GROUP_STRATUM).items():
            g, s = key.split("|", 1)
            rows.append(f"stratum_detention_rate,{g},{s},{f17(v)}")
    rows.append(f"threshold,,,{f17(res.rule.cells['*'][0])}")

    dens = ["group,score,density,bandwidth"]
    curves = {}
    for g in cohort.group_set:
        grid, d, h = aud.density_curve(scores[cohort.groups == g])
        curves[g] = d
        dens += [f"{g},{f17(x)},{f17(y)},{f17(h)}" for x, y in zip(grid, d)]

    table = ["group  detention_rate  false_positive_rate"]
    dr, fp = detention_rate(dec), false_positive_rate(dec, "empirical")
    table += [f"{g:<6} {f4(dr[g]):>14}  {f4(fp[g]):>19}" for g in cohort.group_set if g in dr]
    table.append(f"score source: {source}; threshold {f4(res.rule.cells['*'][0])}")
    files = {
        "disparity.csv": "\n".join(rows) + "\n",
        "density.csv": "\n".join(dens) + "\n",
        "disparity.txt": "\n".join(table) + "\n",
    }
    if args.svg:
        files["density.svg"] = svg_lines("Risk density by group", np.linspace(0, 1, 201), curves)
        files["disparity.svg"] = svg_bars("Detention rate by group", list(dr), {"detention_rate": list(dr.values())})
    return files


def cmd_audit(args) -> dict[str, str]:
    if args.synthetic:
        cohort = aud.redline_population(args.n, seed=args.seed)
        scores, source = cohort.column("risk"), "risk"
    else:
        cohort, _ = read_any_cohort(args.input, args.schema, args.label)
        col = args.score_column
        if col is None and "vendor_score" in cohort.feature_names:
            col = "vendor_score"
        scores, source = _scores_for(cohort, col, args.seed)
    groups, y = cohort.groups, cohort.outcomes
    if args.bins == "auto":
        bins = default_bins(scores)
    elif args.bins == "levels":
        bins = Bins.integer_levels(1, 10)
    else:
        bins = Bins.equal_width(int(args.bins), 0.0, 1.0)
    files = {}
    original = aud.audit_calibration(scores, groups, y, bins)
    files["calibration.csv"] = _rows_csv(calibration_curve(scores, groups, y, bins).rows())
    files["calibration_test.csv"] = _rows_csv(original.rows())
    summary = [f"score source: {source}", f"original scores calibrated: {'pass' if original.passed else 'fail'}"]

    # the redline construction needs probabilities; vendor deciles are mapped by rank
    prob = scores if scores.min() >= 0 and scores.max() <= 1 else _to_unit(scores)
    target = args.target_group or cohort.group_set[0]
    art = aud.redline_scores(prob, groups, y, target, args.noise, seed=args.seed, scale=args.noise_scale,
                             quantile=args.quantile)
    refit_bins = bins if bins.edges[0] <= 0 and bins.edges[-1] >= 1 else Bins.equal_width(10)
    refit_audit = aud.audit_calibration(art.refit, groups, y, refit_bins)
    files["redline.csv"] = _rows_csv([{"id": cohort.ids[r["index"]], "group": groups[r["index"]], **r}
                                      for r in art.rows()])
    files["redline_calibration_test.csv"] = _rows_csv(refit_audit.rows())
    t = art.target
    info = aud.informativeness_report(art.original[t], art.refit[t], y[t])
    files["informativeness.csv"] = _rows_csv(info.rows())

    dens = ["series,score,density,bandwidth"]
    curves = {}
    for name, vals in (("original", art.original[t]), ("refit", art.refit[t])):
        grid, d, h = aud.density_curve(vals)
        curves[name] = d
        dens += [f"{name},{f17(x)},{f17(v)},{f17(h)}" for x, v in zip(grid, d)]
    files["redline_density.csv"] = "\n".join(dens) + "\n"
    summary += [
        f"target group: {target}; noise {f4(args.noise)} ({args.noise_scale}); threshold {f4(art.threshold)}",
        f"above threshold before {f4(art.above_before)}, after {f4(art.above_after)}",
        f"refit scores calibrated: {'pass' if refit_audit.passed else 'fail'}",
        f"AUC original {f4(info.auc_original)}, refit {f4(info.auc_refit)}, difference {f4(info.auc_difference)}",
        f"sd original {f4(info.sd_original)}, refit {f4(info.sd_refit)}",
    ]
    files["audit.txt"] = "\n".join(summary) + "\n"
    if args.svg:
        files["redline_density.svg"] = svg_lines("Target-group risk density", np.linspace(0, 1, 201), curves)
    return files


def _to_unit(scores: np.ndarray) -> np.ndarray:
    lo, hi = float(scores.min()), float(scores.max())
    if hi == lo:
        return np.full(scores.shape, 0.5)
    return (scores - lo + 0.5) / (hi - lo + 1.0)


def _rows_csv(rows: list[dict]) -> str:
    import csv
    import io

    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: aud.fmt17(v) for k, v in r.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# SVG rendering (no plotting dependency)

_W, _H, _PAD = 480, 300, 40
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _svg(title: str, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">'
            f'<rect width="{_W}" height="{_H}" fill="white"/>'
            f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>')
    return head + "".join(body) + "</svg>\n"


def svg_lines(title: str, x, series: dict[str, np.ndarray]) -> str:
    x = np.asarray(x, dtype=float)
    top = max(float(np.max(v)) for v in series.values()) or 1.0
    body = []
    for k, (name, ys) in enumerate(series.items()):
        px = _PAD + (x - x.min()) / (x.max() - x.min()) * (_W - 2 * _PAD)
        py = _H - _PAD - np.asarray(ys) / top * (_H - 2 * _PAD)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
        color = _COLORS[k % len(_COLORS)]
        body.append(f'<polyline fill="none" stroke="{color}" points="{pts}"/>')
        body.append(f'<text x="{_W - _PAD}" y="{40 + 16 * k}" text-anchor="end" fill="{color}" '
                    f'font-size="12">{name}</text>')
    return _svg(title, body)


def svg_bars(title: str, labels: list[str], series: dict[str, list[float]]) -> str:
    values = next(iter(series.values()))
    finite = [v for v in values if not math.isnan(v)]
    top = max(finite) if finite and max(finite) > 0 else 1.0
    slot = (_W - 2 * _PAD) / max(1, len(labels))
    body = []
    for k, (lab, v) in enumerate(zip(labels, values)):
        v = 0.0 if math.isnan(v) else v
        h = v / top * (_H - 2 * _PAD)
        x = _PAD + k * slot + slot * 0.15
        body.append(f'<rect x="{x:.2f}" y="{_H - _PAD - h:.2f}" width="{slot * 0.7:.2f}" height="{h:.2f}" '
                    f'fill="{_COLORS[0]}"/>')
        body.append(f'<text x="{x + slot * 0.35:.2f}" y="{_H - _PAD + 14}" text-anchor="middle" '
                    f'font-size="9">{lab}</text>')
    return _svg(title, body)


# ---------------------------------------------------------------------------

COMMANDS = {"prepare": cmd_prepare, "experiment": cmd_experiment, "disparity": cmd_disparity, "audit": cmd_audit}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        validate(args)
    except UsageError as exc:
        print(f"fairthresh: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        files = COMMANDS[args.command](args)
    except (UsageError, CohortError) as exc:
        print(f"fairthresh: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"fairthresh: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    # single writer, after all work has succeeded
    os.makedirs(args.out, exist_ok=True)
    files["config.json"] = json.dumps(resolved_config(args), indent=2, sort_keys=True) + "\n"
    for name, text in sorted(files.items()):
        with open(os.path.join(args.out, name), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    for name in ("table1.txt", "disparity.txt", "audit.txt"):
        if name in files:
            sys.stdout.write(files[name])
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
