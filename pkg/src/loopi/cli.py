"""Command line entry points: ``loopi run`` and ``loopi predict``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, config_hash, load_config, with_seed
from .estimators import EstimatorSpec, fit
from .intervals import build_interval, build_split_interval, loo_residuals
from .validation import ExperimentReport, ReplicationRecord, honesty_gap

COVERAGE_FIELDS = ["replication", "estimator", "coverage", "length", "tau", "iterations",
                   "failed", "flags"]
DIAGNOSTIC_FIELDS = ["replication", "estimator", "tau", "lp_norm", "perturbation",
                     "trace_pinv", "trace_pinv2", "lambda_min"]
SUMMARY_FIELDS = ["estimator", "metric", "value", "se", "value_4sig", "se_4sig"]


def fmt(x) -> str:
    """Round-trip representation used in every CSV."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def fmt4(x: float) -> str:
    return format(float(x), ".4g")


def _csv_text(fields: list[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def atomic_write(path: Path, text: str):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def coverage_rows(report: ExperimentReport):
    for r in report.records:
        yield [r.replication, r.estimator, r.coverage, r.length, r.tau, r.iterations,
               r.failed, r.flags]


def diagnostic_rows(report: ExperimentReport):
    spectral = {s.replication: s for s in report.spectral}
    for r in report.records:
        s = spectral.get(r.replication)
        extra = [s.trace_pinv, s.trace_pinv2, s.lambda_min] if s else [math.nan] * 3
        yield [r.replication, r.estimator, r.tau, r.lp_norm, r.perturbation, *extra]


def summary_rows(report: ExperimentReport):
    for label, metrics in report.aggregates.items():
        for name, agg in metrics.items():
            yield [label, name, agg.value, agg.se, fmt4(agg.value), fmt4(agg.se)]
        n_fail = report.failures[label]
        yield [label, "failures", float(n_fail), 0.0, fmt4(n_fail), fmt4(0.0)]
    if report.spectral:
        for name in ("trace_pinv", "trace_pinv2", "lambda_min"):
            values = np.array([getattr(s, name) for s in report.spectral])
            se = float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else math.nan
            yield ["design", name, float(values.mean()), se, fmt4(values.mean()), fmt4(se)]


def read_coverage_csv(path) -> list[ReplicationRecord]:
    """Parse ``coverage.csv`` back into records."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(ReplicationRecord(
                replication=int(row["replication"]),
                estimator=row["estimator"],
                coverage=float(row["coverage"]),
                length=float(row["length"]),
                tau=float(row["tau"]),
                iterations=int(row["iterations"]),
                failed=row["failed"] == "1",
                flags=row["flags"],
            ))
    return out


def _print_summary(report: ExperimentReport, out=None):
    out = sys.stdout if out is None else out
    cfg = report.config
    print(f"n={cfg.design.n} p={cfg.design.p} alpha={cfg.alpha} R={cfg.replications} "
          f"M={cfg.prediction_draws} seed={cfg.seed}", file=out)
    header = f"{'estimator':<22}{'gap':>10}{'coverage':>10}{'length':>10}{'tau':>10}{'fail':>6}"
    print(header, file=out)
    for label, m in report.aggregates.items():
        print(f"{label:<22}{fmt4(m['honesty_gap'].value):>10}{fmt4(m['coverage'].value):>10}"
              f"{fmt4(m['length'].value):>10}{fmt4(m['tau'].value):>10}"
              f"{report.failures[label]:>6}", file=out)


def cmd_run(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    try:
        config = load_config(args.config, args.set or [])
        if args.seed is not None:
            config = with_seed(config, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    report = honesty_gap(config, jobs=max(1, args.jobs))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {
        "coverage.csv": _csv_text(COVERAGE_FIELDS, coverage_rows(report)),
        "diagnostics.csv": _csv_text(DIAGNOSTIC_FIELDS, diagnostic_rows(report)),
        "summary.csv": _csv_text(SUMMARY_FIELDS, summary_rows(report)),
    }
    for name, text in files.items():
        atomic_write(out_dir / name, text)
    manifest = {
        "config_hash": config_hash(config),
        "master_seed": config.seed,
        "tool_version": __version__,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "outputs": sorted(files) + ["manifest.json"],
    }
    atomic_write(out_dir / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    if not args.quiet:
        _print_summary(report)

    budget = config.failure_budget * config.replications
    over = {k: v for k, v in report.failures.items() if v > budget}
    if over:
        print(f"estimator failures exceed budget ({budget:g} of {config.replications}): {over}",
              file=sys.stderr)
        return 2
    return 0


class InputError(ValueError):
    pass


def read_numeric_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise InputError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    values = []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise InputError(f"{path}: line {lineno} has {len(row)} cells, expected {len(header)}")
        try:
            values.append([float(c) for c in row])
        except ValueError:
            raise InputError(f"{path}: line {lineno} has a non-numeric cell") from None
    data = np.array(values, dtype=float).reshape(len(values), len(header))
    if not np.all(np.isfinite(data)):
        raise InputError(f"{path}: missing or non-finite values")
    return header, data


def _estimator_from_args(args) -> EstimatorSpec:
    return EstimatorSpec(args.estimator, lam=args.lam, k=args.huber_k, c=args.js_c)


def cmd_predict(args) -> int:
    try:
        spec = _estimator_from_args(args)
        header, data = read_numeric_csv(args.data)
        if data.shape[0] < 2:
            raise InputError(f"{args.data}: need at least 2 observations, got {data.shape[0]}")
        if data.shape[1] < 2:
            raise InputError(f"{args.data}: need a response column and at least one feature")
        Y, X = data[:, 0], data[:, 1:]
        _, X0 = read_numeric_csv(args.x0)
        if X0.shape[1] != X.shape[1]:
            raise InputError(f"{args.x0}: {X0.shape[1]} features, expected {X.shape[1]}")
        if not 0 < args.alpha < 1:
            raise InputError(f"alpha must lie in (0, 1), got {args.alpha}")
    except (InputError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    side = {None: "two-sided", "lower": "lower-only", "upper": "upper-only"}[args.one_sided]
    if args.split is not None:
        intervals = [build_split_interval(spec, X, Y, x0, args.split, args.alpha, side) for x0 in X0]
        method = "split"
    else:
        full = fit(spec, X, Y)
        loo = loo_residuals(spec, X, Y, full_fit=full)
        intervals = [build_interval(x0, full.beta_hat, loo, args.alpha, side) for x0 in X0]
        method = loo.method
    rows = [[pi.point, pi.lower, pi.upper] for pi in intervals]
    print(f"# estimator={spec.label} alpha={args.alpha} side={side} residuals={method}")
    print("point,lower,upper")
    for row in rows:
        print(",".join(fmt(v) for v in row))
    if args.out:
        atomic_write(Path(args.out), _csv_text(["point", "lower", "upper"], rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loopi", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a Monte Carlo experiment from a config file")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a config field, e.g. design.n=200")
    run.add_argument("--quiet", action="store_true")
    run.set_defaults(func=cmd_run)

    pred = sub.add_parser("predict", help="leave-one-out prediction interval for new rows")
    pred.add_argument("--data", required=True, help="CSV: response column then features")
    pred.add_argument("--x0", required=True, help="CSV of feature rows to predict")
    pred.add_argument("--estimator", required=True,
                      choices=["ols", "ridge", "lasso", "huber", "james-stein"])
    pred.add_argument("--lambda", dest="lam", type=float)
    pred.add_argument("--huber-k", type=float)
    pred.add_argument("--js-c", type=float)
    pred.add_argument("--alpha", type=float, default=0.1)
    pred.add_argument("--split", type=float, metavar="NU")
    pred.add_argument("--one-sided", choices=["lower", "upper"])
    pred.add_argument("--out")
    pred.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
