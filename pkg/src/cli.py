"""
Command-line interface.

    run      one strategy, one seed or a batch of seeds
    compare  all three strategies on shared seeds
    sweep    rho trade-off sweep after the first measurement, written as CSV
    fit      trade-off fit from a sweep CSV
"""

import argparse
import json
import logging
import os
from dataclasses import replace

from src.autotune import (
    calibrate,
    fit_inverse_tradeoff,
    pareto_filter,
    read_sweep_csv,
    write_sweep_csv,
)
from src.case_io import ESTIMATION_MODES, STRATEGIES, ExperimentConfig, load_case, load_experiment_config
from src.errors import OedOpfError
from src.runner import (
    compare_strategies,
    first_step_belief,
    run_algorithm,
    run_batch,
    write_records_csv,
    write_records_json,
    write_summary_json,
)
from src.utils import configure_logging, default_workers, ensure_dir

logger = logging.getLogger(__name__)

DEFAULT_CASE = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
                            "assets", "cases", "case5_oed.m")


def _add_common(parser):
    parser.add_argument("--case", default=DEFAULT_CASE, help="MATPOWER .m or native .json case file")
    parser.add_argument("--config", help="JSON experiment configuration")
    parser.add_argument("--seed", type=int, help="random seed (overrides the configuration)")
    parser.add_argument("--out", default="output", help="output directory")
    parser.add_argument("--paper-strict-sensitivity", action="store_true",
                        help="drop the direct dM/dy term from the parameter sensitivity")
    parser.add_argument("--workers", type=int, default=None, help="parallel workers")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")


def _add_experiment(parser):
    parser.add_argument("--refit-every", type=int, default=None,
                        help="re-sweep rho every N steps (0 sweeps once)")
    parser.add_argument("--estimation", choices=ESTIMATION_MODES, default=None,
                        help="re-estimate from all measurements (batch) or from the last belief (sequential)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="oedopf", description="Line-parameter estimation with cost-aware experiment design")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one strategy")
    _add_common(run)
    run.add_argument("--strategy", choices=STRATEGIES)
    _add_experiment(run)
    run.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds to run")
    run.add_argument("--format", choices=("csv", "json"), default="csv")

    compare = sub.add_parser("compare", help="run all strategies on shared seeds")
    _add_common(compare)
    _add_experiment(compare)
    compare.add_argument("--seeds", type=int, default=20)
    compare.add_argument("--format", choices=("csv", "json"), default="csv")

    sweep = sub.add_parser("sweep", help="export the rho trade-off curve")
    _add_common(sweep)

    fit = sub.add_parser("fit", help="fit the inverse trade-off from a sweep CSV")
    fit.add_argument("sweep_csv")
    fit.add_argument("--out", default=None, help="write the fit as JSON to this file")
    fit.add_argument("--log-level", default=None)
    return parser


def experiment_from_args(args):
    """Case and ExperimentConfig from the parsed arguments; flags override the config file."""
    config = load_experiment_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
    if getattr(args, "strategy", None):
        overrides["strategy"] = args.strategy
    if args.paper_strict_sensitivity:
        overrides["paper_strict_sensitivity"] = True
    if getattr(args, "refit_every", None) is not None:
        overrides["refit_every"] = args.refit_every
    if getattr(args, "estimation", None):
        overrides["estimation"] = args.estimation
    return load_case(args.case), replace(config, **overrides)


def _write_run(summary, case, out, fmt):
    stem = os.path.join(out, f"{summary.strategy}_seed{summary.seed}")
    if fmt == "json":
        write_records_json(summary, f"{stem}_records.json")
    else:
        write_records_csv(summary, f"{stem}_records.csv")
    write_summary_json(summary, f"{stem}_summary.json", case)


def cmd_run(args):
    case, config = experiment_from_args(args)
    out = ensure_dir(args.out)
    workers = args.workers or default_workers()
    if args.seeds > 1:
        seeds = range(config.rng_seed, config.rng_seed + args.seeds)
        summaries = run_batch(case, config, seeds, strategies=[config.strategy], workers=workers).values()
    else:
        summaries = [run_algorithm(case, config, workers=workers)]
    failed = 0
    for summary in summaries:
        _write_run(summary, case, out, args.format)
        print(f"{summary.strategy} seed {summary.seed}: {summary.reason} after {summary.terminated_at} "
              f"steps ({summary.grid_hours:.2f} h), cumulative cost {summary.cumulative_cost:.6g}")
        failed += summary.reason == "aborted"
    return 1 if failed else 0


def cmd_compare(args):
    case, config = experiment_from_args(args)
    out = ensure_dir(args.out)
    seeds = range(config.rng_seed, config.rng_seed + args.seeds)
    results = run_batch(case, config, seeds, workers=args.workers or default_workers())
    for summary in results.values():
        _write_run(summary, case, out, args.format)
    comparison = compare_strategies(results.values())
    comparison.table.to_csv(os.path.join(out, "comparison.csv"), float_format="%.17g")
    comparison.trace_curve.to_csv(os.path.join(out, "trace_curve.csv"), float_format="%.17g")
    print(f"Common horizon: {comparison.horizon} steps")
    print(comparison.table.to_string())
    return 0


def cmd_sweep(args):
    case, config = experiment_from_args(args)
    out = ensure_dir(args.out)
    belief, x_s, u = first_step_belief(case, config)
    samples, front, fit = calibrate(
        case, belief, config.rho_grid_values(), noise=config.noise_variance, warm_start=(x_s, u),
        paper_strict=config.paper_strict_sensitivity, workers=args.workers or default_workers())
    path = os.path.join(out, "sweep.csv")
    write_sweep_csv(samples, path)
    print(f"Wrote {len(samples)} samples ({len(front)} on the Pareto front) to {path}")
    print(f"Fit: a={fit.amplitude:.6g} lambda={fit.decay:.6g} residual={fit.residual:.3g}")
    return 0


def cmd_fit(args):
    front = pareto_filter(read_sweep_csv(args.sweep_csv))
    fit = fit_inverse_tradeoff(front)
    print(f"Fit over {len(front)} Pareto samples: a={fit.amplitude:.17g} lambda={fit.decay:.17g} "
          f"residual={fit.residual:.3g}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as handle:
            json.dump({"amplitude": fit.amplitude, "decay": fit.decay, "residual": fit.residual}, handle, indent=2)
    return 0


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "sweep": cmd_sweep, "fit": cmd_fit}


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except (OedOpfError, OSError) as err:
        logger.error("%s: %s", type(err).__name__, err)
        return 1
