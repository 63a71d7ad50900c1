"""Experiment runner: parse a config, dispatch, write reports and figures.

Exit status is nonzero exactly when some check failed its verdict.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, parse_config
from .harness import (
    DualityCheckResult,
    MonteCarloEstimate,
    decoupling_check,
    duality_check,
    ergodic_experiment,
    markov_set_dual_experiment,
    standard_battery,
)
from .reporting import check_record, fmt, write_records, write_summary, write_timings

EXPERIMENT_HELP = {
    "battery": "standard duality battery: every dual kind across three geographies",
    "duality": "explicitly configured duality checks (experiment.checks)",
    "ergodic": "two initial laws, moment distances plus dual trapping statistics",
    "decoupling": "cloud collision frequency versus initial hierarchical distance",
    "markov_set_dual": "set-valued dual of finite Markov chains versus matrix exponentials",
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fvduality",
        description="simulation and Monte-Carlo verification of Fleming-Viot dualities",
    )
    parser.add_argument("--list-experiments", action="store_true", help="list experiment kinds")
    sub = parser.add_subparsers(dest="command")
    runp = sub.add_parser("run", help="run the experiment described by a config file")
    runp.add_argument("config", type=Path)
    runp.add_argument("--seed", type=int, default=None, help="override the master seed")
    runp.add_argument("--workers", type=int, default=None, help="override the worker count")
    runp.add_argument("--output-dir", type=Path, default=None)
    runp.add_argument("--filter", default=None, help="run only checks whose name contains this")
    plots = runp.add_mutually_exclusive_group()
    plots.add_argument("--plots", dest="plots", action="store_true", default=None)
    plots.add_argument("--no-plots", dest="plots", action="store_false")
    args = parser.parse_args(argv)

    if args.list_experiments:
        for name, desc in EXPERIMENT_HELP.items():
            print(f"{name:16s} {desc}")
        return 0
    if args.command != "run":
        parser.print_help()
        return 2

    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print("configuration errors:", file=sys.stderr)
        for line in exc.errors:
            print(f"  - {line}", file=sys.stderr)
        return 2

    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    if args.plots is not None:
        cfg.plots = args.plots

    try:
        return run(cfg, name_filter=args.filter)
    except OSError as exc:
        print(f"i/o error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return 2


def run(cfg: ExperimentConfig, name_filter: str | None = None) -> int:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    if cfg.kind in ("battery", "duality"):
        status, body, rows, figure = _run_checks(cfg, name_filter, timings)
    elif cfg.kind == "ergodic":
        status, body, rows, figure = _run_ergodic(cfg)
    elif cfg.kind == "decoupling":
        status, body, rows, figure = _run_decoupling(cfg)
    else:
        status, body, rows, figure = _run_markov(cfg)
    timings["total"] = time.perf_counter() - t0

    write_records(cfg.output_dir / "records.csv", rows)
    write_summary(cfg.output_dir / "summary.txt", cfg.raw, body)
    write_timings(cfg.output_dir / "timings.csv", timings)
    if cfg.plots and figure is not None:
        kind_fig, payload = figure
        from . import plots as figmod

        getattr(figmod, kind_fig)(*payload, cfg.output_dir / "report.png")
    print(f"wrote {cfg.output_dir}/records.csv ({len(rows)} records); status {status}")
    return status


def _run_checks(cfg: ExperimentConfig, name_filter, timings):
    if cfg.kind == "battery":
        pairs = standard_battery(cfg.model.params.moran_pop_size)
    else:
        pairs = [(cfg.model, p) for p in cfg.pairings]
    if name_filter:
        pairs = [(m, p) for m, p in pairs if name_filter in p.name]
    results: list[DualityCheckResult] = []
    rows = []
    for model, pairing in pairs:
        t0 = time.perf_counter()
        res = duality_check(model, pairing, cfg.master_seed, cfg.threshold, cfg.workers)
        timings[pairing.name] = time.perf_counter() - t0
        results.append(res)
        rows.append(check_record(cfg.kind, pairing.kind, res))
    body = {
        "checks": [
            {
                "name": r.name,
                "lhs": r.lhs.mean,
                "rhs": r.rhs.mean,
                "z": r.z_score,
                "verdict": "pass" if r.passed else "FAIL",
            }
            for r in results
        ],
        "passed": sum(r.passed for r in results),
        "failed": sum(not r.passed for r in results),
    }
    status = 0 if all(r.passed for r in results) else 1
    figure = ("plot_battery", (results, cfg.threshold)) if results else None
    return status, body, rows, figure


def _estimate_row(name, kind, mc_mean, mc_se, mc_n, oracle, threshold):
    z = abs(mc_mean - oracle) / mc_se if mc_se > 0 else 0.0
    res = DualityCheckResult(
        name=name,
        lhs=MonteCarloEstimate(mc_mean, mc_se, mc_n, 0),
        rhs=MonteCarloEstimate(oracle, 0.0, 0, 0),
        z_score=z,
        threshold=threshold,
        passed=bool(z <= threshold),
    )
    return res, check_record("markov_set_dual", kind, res)


def _run_markov(cfg: ExperimentConfig):
    report = markov_set_dual_experiment(
        cfg.master_seed, two_state_replicas=cfg.chain_replicas, threshold=cfg.threshold
    )
    rows = [check_record("markov_set_dual", "setvalued", r) for r in report["results"]]
    status = 0 if all(r.passed for r in report["results"]) else 1
    body = {
        "entries": len(report["results"]),
        "max_z": max(r.z_score for r in report["results"]),
        "passed": sum(r.passed for r in report["results"]),
        "failed": sum(not r.passed for r in report["results"]),
    }
    figure = ("plot_markov_membership", (report["curve_times"], report["curve_mc"], report["curve_oracle"]))
    return status, body, rows, figure


def _run_ergodic(cfg: ExperimentConfig):
    report = ergodic_experiment(
        cfg.model,
        cfg.background_b,
        cfg.t_grid,
        cfg.replicas,
        cfg.master_seed,
        dual_replicas=cfg.dual_replicas,
    )
    rows = []
    for ti, t in enumerate(report.t_grid):
        for j, name in enumerate(report.moment_names):
            d, se = report.distances[ti, j], report.combined_se[ti, j]
            res = DualityCheckResult(
                name=f"t={t:g} {name}",
                lhs=MonteCarloEstimate(float(d), float(se), cfg.replicas, cfg.master_seed),
                rhs=MonteCarloEstimate(0.0, 0.0, cfg.replicas, cfg.master_seed),
                z_score=float(d / se) if se > 0 else 0.0,
                threshold=cfg.threshold,
                passed=bool(d <= cfg.threshold * se) or ti + 1 < len(report.t_grid),
            )
            rows.append(check_record("ergodic", "moments", res))
    body = {
        "converged": report.converged,
        "max_final_z": report.max_final_z,
        "trapped_fraction": list(report.trapped_fraction),
        "trap_value_frequencies": list(report.trap_value_frequencies),
        "dual_aborts": report.dual_aborts,
    }
    return (0 if report.converged else 1), body, rows, ("plot_ergodic", (report,))


def _run_decoupling(cfg: ExperimentConfig):
    report = decoupling_check(
        cfg.model, cfg.distances, cfg.horizon, cfg.replicas, cfg.master_seed
    )
    rows = []
    for i, ell in enumerate(report.distances):
        res = DualityCheckResult(
            name=f"distance={ell}",
            lhs=MonteCarloEstimate(
                float(report.collision_frequency[i]), float(report.collision_se[i]),
                cfg.replicas, cfg.master_seed,
            ),
            rhs=MonteCarloEstimate(float(report.bound[i]), 0.0, 0, 0),
            z_score=0.0,
            threshold=cfg.threshold,
            passed=bool(
                ell == 0
                or report.collision_frequency[i] <= report.bound[i] + 4 * report.collision_se[i]
            ),
        )
        rows.append(check_record("decoupling", "setvalued", res))
    body = {
        "monotone": report.monotone,
        "within_bound": report.within_bound,
        "trapping_rate": report.trapping_rate,
        "collision_frequency": [float(v) for v in report.collision_frequency],
    }
    return (0 if report.monotone else 1), body, rows, ("plot_decoupling", (report,))


if __name__ == "__main__":
    sys.exit(main())
