"""
covshape command line.

    uv run run.py run --config configs/rate_vs_rho_bs.json --out results.csv
    uv run run.py optimize --scenario scenarios/nlos_2ue.json
    uv run run.py estimate --scenario scenarios/nlos_2ue.json --mode effective --rho-ue-dbm 5 15 25
    uv run run.py validate
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from lib.covariance_model import path_covariance
from lib.pilots_estimation import PilotMode
from lib.scenario_geometry import ScenarioError, load_layout
from lib.shaping_optimizer import DEFAULT_ACCURACY, DEFAULT_MAX_ITERATIONS, InitStrategy, OptimizerSettings, optimize_multi, optimize_pair
from src.config import DEFAULT_TRIALS, ConfigError, load_config, resolve_threads
from src.harness import ExperimentError, run_estimation, run_sweep, write_results
from src.validate import report_frame, validate

logger = logging.getLogger("covshape")


def _vector_json(vector) -> list[list[float]]:
    return [[float(c.real), float(c.imag)] for c in np.asarray(vector)]


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    threads = resolve_threads(args.threads, config)
    logger.info("running %s with %d threads", args.config, threads)
    records = run_sweep(config, threads=threads, progress=not args.quiet)
    sidecar = write_results(records, config, args.out)
    print(f"Wrote {len(records)} records to {args.out} and {sidecar}", file=sys.stderr)
    return 0


def _settings(args: argparse.Namespace) -> OptimizerSettings:
    return OptimizerSettings(
        accuracy=args.eps,
        step_size=args.alpha,
        max_iterations=args.max_iterations,
        init=InitStrategy(args.init),
        seed=args.seed,
        distributed=getattr(args, "distributed", False),
    )


def _add_optimizer_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--eps", type=float, default=DEFAULT_ACCURACY)
    parser.add_argument("--alpha", type=float, default=1.0)
    parser.add_argument("--init", choices=[s.value for s in InitStrategy], default=InitStrategy.DOMINANT.value)
    parser.add_argument("--max-iterations", type=int, default=DEFAULT_MAX_ITERATIONS)


def cmd_optimize(args: argparse.Namespace) -> int:
    scenario = load_layout(args.scenario).build()
    sigmas = [path_covariance(scenario, k) for k in range(scenario.num_ues)]
    settings = _settings(args)
    groups = []
    for group in scenario.groups():
        if len(group) < 2:
            continue
        members = [sigmas[k] for k in group]
        report = optimize_pair(*members, settings) if len(group) == 2 else optimize_multi(members, settings)
        groups.append(
            {
                "ues": list(group),
                "vectors": [_vector_json(v) for v in report.vectors],
                "objective_trace": list(report.objective_trace),
                "iterations": report.iterations,
                "converged": report.converged,
            }
        )
    json.dump({"scenario": str(args.scenario), "groups": groups}, sys.stdout, indent=2)
    print()
    return 0


def cmd_estimate(args: argparse.Namespace) -> int:
    base = load_layout(args.scenario)
    threads = resolve_threads(args.threads)
    settings = _settings(args)
    rows = []
    for rho_ue_dbm in args.rho_ue_dbm:
        layout = base.with_powers(rho_ue_dbm=rho_ue_dbm)
        values = run_estimation(
            layout,
            PilotMode(args.mode),
            args.trials,
            args.seed,
            groups=args.pilots,
            tau=args.tau,
            threads=threads,
            settings=settings,
        )
        rows.extend({"ue": k, "rho_ue_dbm": rho_ue_dbm, "nmse": float(v)} for k, v in enumerate(values))
    pd.DataFrame(rows, columns=["ue", "rho_ue_dbm", "nmse"]).to_csv(
        sys.stdout, index=False, float_format="%.12g", lineterminator="\n"
    )
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    config = load_config(args.config) if args.config else None
    results = validate(config)
    print(report_frame(results).to_string(index=False))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="covshape", description="MIMO covariance shaping simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run a sweep from an experiment config")
    run.add_argument("--config", type=Path, required=True)
    run.add_argument("--out", type=Path, default=Path("results.csv"))
    run.add_argument("--threads", type=int, default=None)
    run.add_argument("--quiet", action="store_true", help="no progress bar")
    run.set_defaults(handler=cmd_run)

    optimize = commands.add_parser("optimize", help="compute shaping vectors for a scenario")
    optimize.add_argument("--scenario", type=Path, required=True)
    _add_optimizer_arguments(optimize)
    optimize.add_argument("--seed", type=int, default=0)
    optimize.add_argument("--distributed", action="store_true")
    optimize.set_defaults(handler=cmd_optimize)

    estimate = commands.add_parser("estimate", help="NMSE of the pilot phase alone")
    estimate.add_argument("--scenario", type=Path, required=True)
    estimate.add_argument("--mode", choices=[m.value for m in PilotMode], required=True)
    estimate.add_argument("--tau", type=int, default=None)
    estimate.add_argument("--pilots", type=int, default=None, help="number of pilot groups (default ceil(K/2))")
    estimate.add_argument("--trials", type=int, default=DEFAULT_TRIALS)
    estimate.add_argument("--seed", type=int, default=0)
    estimate.add_argument("--rho-ue-dbm", type=float, nargs="+", default=[5.0, 15.0, 25.0])
    estimate.add_argument("--threads", type=int, default=None)
    _add_optimizer_arguments(estimate)
    estimate.set_defaults(handler=cmd_estimate)

    check = commands.add_parser("validate", help="run the numerical self-checks")
    check.add_argument("--config", type=Path, default=None)
    check.set_defaults(handler=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except (ConfigError, ScenarioError, ValueError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2
    except (ExperimentError, ArithmeticError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
