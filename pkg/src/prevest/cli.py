"""Command-line interface: simulate, scenario, analyze, anonymize.

Every command is deterministic given its config and ``--seed``.  Exit codes:
0 success, 2 usage errors, 3 configuration errors, 4 input parse errors,
5 runtime failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import dataio
from .dataio import AdjustmentPolicy, ParseError, parse_testing_matrix, write_testing_matrix
from .regimens import ConfigError
from .scenarios import (
    SCENARIO_NAMES,
    build_scenario,
    estimate_panel_series,
    run_scenario,
)
from .simulate import simulate
from .uncertainty import IntervalSpec

USAGE_EXIT, CONFIG_EXIT, PARSE_EXIT, RUNTIME_EXIT = 2, 3, 4, 5

HT_K_REFERENCE_REPLICATES = 10_000


@dataclass
class RunReport:
    command: str
    config_digest: str
    seed: int
    wall_time_s: float = 0.0
    outputs: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def check(self) -> None:
        missing = [p for p in self.outputs if not os.path.exists(p)]
        if missing:
            raise RuntimeError(f"declared outputs missing on disk: {missing}")

    def emit(self, log=print) -> None:
        for w in self.warnings:
            log(f"warning: {w}")
        for p in self.outputs:
            log(f"wrote {p}")
        log(f"{self.command}: done in {self.wall_time_s:.1f} s "
            f"(seed {self.seed}, config {self.config_digest})")


def _digest(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _write_rows(path, rows: list[dict], fmt: str) -> None:
    if fmt == "jsonl":
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for row in rows:
                fh.write(json.dumps({k: _json_cell(v) for k, v in row.items()}) + "\n")
        return
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if not rows:
            return
        cols = list(rows[0])
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(row[c]) for c in cols) + "\n")


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else format(v, ".10g")
    return str(v)


def _json_cell(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def _jobs(args) -> int:
    if args.jobs is not None:
        return max(1, args.jobs)
    return max(1, int(os.environ.get("PREVEST_JOBS", "1")))


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(args) -> RunReport:
    t0 = time.monotonic()
    config = dataio.load_scenario_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    report = RunReport(
        command="simulate",
        config_digest=_digest({"path": os.path.abspath(args.config), "seed": args.seed,
                               "replicates": args.replicates}),
        seed=args.seed,
    )
    horizon = config.horizon_days
    totals = np.zeros((horizon + 1, 6))
    for r in range(args.replicates):
        sim = simulate(config, seed=(args.seed, r))
        totals[:, 0] += sim.well.sum(axis=1)
        totals[:, 1] += sim.infectious.sum(axis=1)
        totals[:, 2] += sim.removed.sum(axis=1)
        totals[:, 3] += sim.tested.sum(axis=1)
        totals[:, 4] += sim.positive.sum(axis=1)
        totals[:, 5] += np.nan_to_num(sim.true_prevalence())
        if args.matrices:
            matrix = dataio.matrix_from_simulation(sim)
            path = os.path.join(args.out, f"replicate_{r:04d}.csv")
            write_testing_matrix(matrix, path)
            report.outputs.append(path)
    totals /= args.replicates
    rows = [
        {
            "day": day,
            "mean_well": totals[day, 0],
            "mean_infectious": totals[day, 1],
            "mean_removed": totals[day, 2],
            "mean_tests": totals[day, 3],
            "mean_positives": totals[day, 4],
            "mean_prevalence_nonremoved": totals[day, 5],
        }
        for day in range(1, horizon + 1)
    ]
    out = os.path.join(args.out, f"summary.{args.format}")
    _write_rows(out, rows, args.format)
    report.outputs.append(out)
    report.wall_time_s = time.monotonic() - t0
    report.check()
    return report


def cmd_scenario(args) -> RunReport:
    t0 = time.monotonic()
    bundle = build_scenario(args.name)
    if args.population is not None:
        from dataclasses import replace

        bundle = replace(bundle, config=replace(bundle.config, population_size=args.population))
    interval_spec = None
    if args.intervals:
        interval_spec = IntervalSpec(
            method="bca-bootstrap",
            bootstrap_iterations=args.bootstrap,
            jackknife_block_size=args.block_size,
        )
    report = RunReport(
        command="scenario",
        config_digest=_digest({"name": args.name, "replicates": args.replicates,
                               "population": args.population, "seed": args.seed,
                               "intervals": args.intervals, "bootstrap": args.bootstrap}),
        seed=args.seed,
    )
    if bundle.ht_known_available and args.replicates < HT_K_REFERENCE_REPLICATES:
        report.warnings.append(
            f"known-weight estimator reference runs use {HT_K_REFERENCE_REPLICATES} replicates; "
            f"running {args.replicates}, its aggregates will be noisier"
        )
    if not bundle.ht_known_available:
        report.warnings.append(
            "known-weight estimator is not defined under contact tracing; omitting ht-k columns"
        )
    jobs = _jobs(args)
    if jobs == 1 or args.replicates < 2 * jobs:
        result = run_scenario(
            bundle, args.replicates, seed=args.seed, interval_spec=interval_spec,
            min_stratum_size=args.min_stratum_size,
        )
    else:
        # Replicate seeds are keyed by absolute index, so any partition of the
        # replicate range yields identical results.
        bounds = np.linspace(0, args.replicates, jobs + 1).astype(int)
        spans = [(int(a), int(b - a)) for a, b in zip(bounds, bounds[1:]) if b > a]
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(
                pool.map(
                    lambda span: run_scenario(
                        bundle, span[1], seed=args.seed, interval_spec=interval_spec,
                        min_stratum_size=args.min_stratum_size, first_replicate=span[0],
                    ),
                    spans,
                )
            )
        result = parts[0]
        for part in parts[1:]:
            result.truth = np.vstack([result.truth, part.truth])
            for kind in result.estimators:
                result.estimates[kind] = np.vstack([result.estimates[kind],
                                                    part.estimates[kind]])
                result.unclipped[kind] = np.vstack([result.unclipped[kind],
                                                    part.unclipped[kind]])
                result.covered[kind] = np.vstack([result.covered[kind], part.covered[kind]])
        result.replicates = args.replicates
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, f"{args.name}.{args.format}")
    _write_rows(out, list(result.rows()), args.format)
    report.outputs.append(out)
    report.wall_time_s = time.monotonic() - t0
    report.check()
    return report


def cmd_analyze(args) -> RunReport:
    t0 = time.monotonic()
    matrix = parse_testing_matrix(args.matrix)
    policy = dataio.load_adjustment_policy(args.policy) if args.policy else AdjustmentPolicy()
    adjusted = dataio.apply_adjustments(matrix, policy)
    interval_spec = None
    if args.intervals:
        interval_spec = IntervalSpec(
            method="bca-bootstrap",
            bootstrap_iterations=args.bootstrap,
            jackknife_block_size=args.block_size,
        )
    series = estimate_panel_series(
        adjusted.panel,
        policy.tests,
        estimators=("tpr", "ht-e"),
        interval_spec=interval_spec,
        excluded_days=adjusted.excluded_days,
        min_stratum_size=args.min_stratum_size,
        seed=args.seed,
    )
    report = RunReport(
        command="analyze",
        config_digest=_digest({"matrix": os.path.abspath(args.matrix),
                               "policy": args.policy and os.path.abspath(args.policy),
                               "seed": args.seed}),
        seed=args.seed,
    )
    n_excluded = int(adjusted.excluded_days[1:].sum())
    if n_excluded:
        report.warnings.append(f"{n_excluded} day(s) below {policy.min_daily_tests} tests excluded")
    if adjusted.n_dropped_weekly:
        report.warnings.append(
            f"{adjusted.n_dropped_weekly} repeat within-week test(s) dropped"
        )
    if adjusted.n_dropped_isolation:
        report.warnings.append(
            f"{adjusted.n_dropped_isolation} test(s) during isolation windows dropped"
        )
    if args.format == "jsonl":
        series.to_jsonl(args.out)
    else:
        series.to_csv(args.out)
    report.outputs.append(args.out)
    report.wall_time_s = time.monotonic() - t0
    report.check()
    return report


def cmd_anonymize(args) -> RunReport:
    t0 = time.monotonic()
    matrix = parse_testing_matrix(args.matrix)
    policy = dataio.load_adjustment_policy(args.policy) if args.policy else AdjustmentPolicy()
    shuffled = dataio.anonymize_shuffle(matrix, seed=args.seed, policy=policy)
    write_testing_matrix(shuffled, args.out)
    report = RunReport(
        command="anonymize",
        config_digest=_digest({"matrix": os.path.abspath(args.matrix), "seed": args.seed}),
        seed=args.seed,
        outputs=[args.out],
        wall_time_s=time.monotonic() - t0,
    )
    report.check()
    return report


# ---------------------------------------------------------------------------
# Argument parsing


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prevest",
        description="Simulation and estimation of prevalence under repeated testing "
                    "with isolation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_min_stratum=True):
        p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
        p.add_argument("--format", choices=("csv", "jsonl"), default="csv",
                       help="output format (default csv)")
        p.add_argument("--jobs", type=int, default=None,
                       help="worker threads (default $PREVEST_JOBS or 1)")
        if with_min_stratum:
            p.add_argument("--min-stratum-size", type=int, default=10,
                           help="headcount fallback below this stratum size (default 10)")

    p_sim = sub.add_parser("simulate", help="run a scenario config and write summaries")
    p_sim.add_argument("--config", required=True, help="scenario config (JSON)")
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.add_argument("--replicates", type=_positive_int, default=1)
    p_sim.add_argument("--matrices", action="store_true",
                       help="also export one testing matrix per replicate")
    common(p_sim, with_min_stratum=False)
    p_sim.set_defaults(func=cmd_simulate)

    p_sc = sub.add_parser("scenario", help="run a named built-in study scenario")
    p_sc.add_argument("--name", required=True, choices=SCENARIO_NAMES)
    p_sc.add_argument("--replicates", type=_positive_int, default=1000)
    p_sc.add_argument("--population", type=int, default=None,
                      help="override the scenario's population size")
    p_sc.add_argument("--out", required=True, help="output directory")
    p_sc.add_argument("--intervals", action="store_true",
                      help="also evaluate confidence-interval coverage")
    p_sc.add_argument("--bootstrap", type=int, default=399,
                      help="bootstrap iterations when --intervals is set (default 399)")
    p_sc.add_argument("--block-size", type=int, default=10,
                      help="jackknife block size for the bootstrap acceleration (default 10)")
    common(p_sc)
    p_sc.set_defaults(func=cmd_scenario)

    p_an = sub.add_parser("analyze", help="estimate prevalence from a testing matrix")
    p_an.add_argument("--matrix", required=True, help="testing-matrix CSV")
    p_an.add_argument("--policy", default=None, help="adjustment policy (JSON)")
    p_an.add_argument("--out", required=True, help="output estimate series file")
    p_an.add_argument("--intervals", action="store_true")
    p_an.add_argument("--bootstrap", type=int, default=399)
    p_an.add_argument("--block-size", type=int, default=10)
    common(p_an)
    p_an.set_defaults(func=cmd_analyze)

    p_sh = sub.add_parser("anonymize", help="shuffle a testing matrix within schedule strata")
    p_sh.add_argument("--matrix", required=True)
    p_sh.add_argument("--policy", default=None,
                      help="adjustment policy for removal bookkeeping (JSON)")
    p_sh.add_argument("--out", required=True)
    common(p_sh, with_min_stratum=False)
    p_sh.set_defaults(func=cmd_anonymize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        report = args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return CONFIG_EXIT
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return PARSE_EXIT
    except Exception as exc:  # runtime failures get their own exit code
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT
    report.emit()
    return 0


if __name__ == "__main__":
    sys.exit(main())
