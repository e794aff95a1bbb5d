"""
Closed-loop estimation experiments.

One run alternates between the simulated true grid and the estimator:

1. apply the set-point u to the true system and measure it with noise,
2. update the parameter belief from the measurement,
3. stop if the predicted variance is small enough or the horizon is used up,
4. (autotuned strategy) update the weight rho from the variance reached,
5. choose the next set-point with the strategy's decision problem.

Three strategies share this loop: ``opf_mle`` (pure economic dispatch),
``pure_oed`` (pure experiment design) and ``oed_opf_autotuned``.
"""

import json
import logging
import time
from collections import namedtuple
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

import numpy as np
import pandas as pd

from src.autotune import RhoController, calibrate, rho_update
from src.case_io import STRATEGIES, case_with_demand_scale
from src.errors import (
    AllSolvesFailed,
    DegenerateFit,
    DimensionMismatch,
    InformationDecrease,
    InsufficientSamples,
    OedOpfError,
    PFFailure,
    PowerFlowError,
    ZeroTruthEntry,
)
from src.estimator import Belief, MeasurementHistory, mle_update
from src.grid_core import grid_model
from src.oed_core import DecisionProblemSpec, generation_cost, solve_decision
from src.pf_solver import solve_power_flow

logger = logging.getLogger(__name__)

DECISION_KIND = {"opf_mle": "opf", "pure_oed": "oed", "oed_opf_autotuned": "oed_opf"}
# relative slack allowed in the step-to-step Tr(V) comparison (round-off only)
TRACE_RTOL = 1e-9
# steps between re-sweeps while the trade-off fit is poor
POOR_FIT_RETRY = 5
RECORD_COLUMNS = ["k", "strategy", "rho", "trace_v", "step_cost", "cumulative_cost",
                  "mre_g", "mre_b", "wall_time", "grid_hours"]


@dataclass
class IterationRecord:
    k: int
    strategy: str
    rho: Optional[float]
    u: np.ndarray
    eta: np.ndarray
    estimate: np.ndarray
    trace_v: float
    step_cost: float
    cumulative_cost: float
    mre_g: float
    mre_b: float
    wall_time: float
    grid_hours: float = 0.0


@dataclass
class RunSummary:
    strategy: str
    seed: int
    records: List[IterationRecord] = field(default_factory=list)
    reason: str = "horizon"
    true_params: Optional[np.ndarray] = None
    error: Optional[str] = None
    sampling_minutes: float = 15.0

    @property
    def terminated_at(self):
        return len(self.records)

    @property
    def grid_hours(self):
        return self.terminated_at * self.sampling_minutes / 60.0

    @property
    def final_estimate(self):
        return self.records[-1].estimate if self.records else None

    @property
    def cumulative_cost(self):
        return self.records[-1].cumulative_cost if self.records else 0.0

    def line_rows(self, case):
        """Final estimates against the truth, one dict per line."""
        L = case.n_lines
        est = [float(v) for v in self.final_estimate]
        truth = [float(v) for v in self.true_params]
        rows = []
        for j, line in enumerate(case.lines):
            rows.append({
                "from_bus": line.from_bus,
                "to_bus": line.to_bus,
                "g_true": truth[j],
                "g_est": est[j],
                "g_rel_error": abs(est[j] - truth[j]) / abs(truth[j]),
                "b_true": truth[L + j],
                "b_est": est[L + j],
                "b_rel_error": abs(est[L + j] - truth[L + j]) / abs(truth[L + j]),
            })
        return rows

    def line_table(self, case):
        return pd.DataFrame(self.line_rows(case))

    def to_dict(self):
        last = self.records[-1] if self.records else None
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "reason": self.reason,
            "terminated_at": self.terminated_at,
            "grid_hours": self.grid_hours,
            "cumulative_cost": self.cumulative_cost,
            "final_trace_v": last.trace_v if last else None,
            "mre_g": last.mre_g if last else None,
            "mre_b": last.mre_b if last else None,
            "final_estimate": None if last is None else [float(v) for v in last.estimate],
            "true_params": None if self.true_params is None else [float(v) for v in self.true_params],
            "error": self.error,
        }


def prior_mean(case):
    """Every line starts at the average g and the average b of the case."""
    y = case.nominal_params()
    L = case.n_lines
    return np.concatenate([np.full(L, y[:L].mean()), np.full(L, y[L:].mean())])


def true_operating_point(case, y_true, u, warm_start=None):
    """State of the true system under input u."""
    try:
        return solve_power_flow(case, y_true, u, warm_start=warm_start).x
    except PowerFlowError as err:
        raise PFFailure(f"true system has no power-flow solution for this input: {err}") from err


def _noisy(model, x, y_true, rng, noise):
    clean = model.measurement(x, y_true)
    sigma = np.sqrt(np.broadcast_to(np.asarray(noise, dtype=float), clean.shape))
    return clean + rng.normal(0.0, 1.0, clean.shape) * sigma


def simulate_measurement(case, y_true, u, rng, noise=1e-4, warm_start=None):
    """eta = M(x_true, y_true) + w with w ~ N(0, diag(noise)) drawn from ``rng``."""
    model = grid_model(case)
    x = true_operating_point(case, y_true, model.check_input(u), warm_start)
    return _noisy(model, x, y_true, rng, noise)


def measurement_rng(seed, k):
    """Independent, reproducible noise stream for step k of run ``seed``."""
    return np.random.default_rng([int(seed), int(k)])


def mean_relative_errors(y_est, y_true):
    """(mean |g - g_true| / |g_true|, same for b) over the lines."""
    y_est = np.asarray(y_est, dtype=float)
    y_true = np.asarray(y_true, dtype=float)
    if y_est.shape != y_true.shape or y_true.size % 2:
        raise DimensionMismatch(f"estimate shape {y_est.shape} does not match truth shape {y_true.shape}")
    if np.any(y_true == 0):
        raise ZeroTruthEntry("relative error is undefined for a zero true parameter")
    rel = np.abs(y_est - y_true) / np.abs(y_true)
    L = y_true.size // 2
    return float(rel[:L].mean()), float(rel[L:].mean())


def _slack_p(case, x, y):
    model = grid_model(case)
    p, _ = model.slack_injection(x, y)
    return p + model.slack_demand()[0]


def _refit_due(config, controller, k, last_fit_k):
    if config.refit_every and (k - 1) % config.refit_every == 0:
        return True
    return controller.needs_refit and k - last_fit_k >= POOR_FIT_RETRY


def _calibrated_fit(case, belief, config, warm_start, workers):
    """Trade-off fit at the current belief, or None when the sweep gives nothing to fit."""
    try:
        _, _, fit = calibrate(case, belief, config.rho_grid_values(), noise=config.noise_variance,
                              warm_start=warm_start, paper_strict=config.paper_strict_sensitivity,
                              workers=workers)
    except (AllSolvesFailed, InsufficientSamples, DegenerateFit) as err:
        logger.warning("rho calibration gave no usable fit (%s); stepping rho without one", err)
        return None
    return fit


def run_algorithm(case, config, seed=None, demand_profile=None, workers=None, progress_callback=None):
    """
    Run one closed-loop experiment with ``config.strategy``.

    Args:
        case: GridCase of the true system (its line data is the default truth).
        config: ExperimentConfig.
        seed: overrides ``config.rng_seed``.
        demand_profile: optional callable k -> demand scale factor.
        workers: threads for the rho sweep of the autotuned strategy.
        progress_callback: optional callable(progress_pct, message).

    Returns:
        RunSummary. Errors raised by the package stop the run; the records
        gathered so far are kept and ``reason`` is ``aborted``.
    """
    seed = config.rng_seed if seed is None else seed
    strategy = config.strategy
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy '{strategy}'")
    kind = DECISION_KIND[strategy]
    autotuned = strategy == "oed_opf_autotuned"
    noise = config.noise_variance
    horizon = config.horizon

    y_true = config.true_param_array()
    if y_true is None:
        y_true = case.nominal_params()
    y0 = config.initial_param_array()
    if y0 is None:
        y0 = prior_mean(case)
    belief = Belief.from_variance(y0, config.prior_variance)
    initial_trace = belief.trace_of_covariance()
    history = MeasurementHistory(prior=belief) if config.estimation == "batch" else None

    summary = RunSummary(strategy=strategy, seed=seed, true_params=y_true,
                         sampling_minutes=config.sampling_minutes)
    controller = None
    last_fit_k = 0
    rho = config.rho0 if autotuned else None
    applied_rho = None
    cumulative = 0.0
    previous_trace = np.inf
    x_true = None

    def report(pct, message):
        if progress_callback:
            progress_callback(pct, message)
        else:
            logger.info(message)

    def case_at(k):
        return case if demand_profile is None else case_with_demand_scale(case, demand_profile(k))

    try:
        first = solve_decision(case_at(1), DecisionProblemSpec(
            kind="opf", belief=belief, noise=noise, paper_strict=config.paper_strict_sensitivity))
        u = first.u

        for k in range(1, horizon + 1):
            started = time.perf_counter()
            case_k = case_at(k)
            model = grid_model(case_k)

            x_true = true_operating_point(case_k, y_true, u, warm_start=x_true)
            eta = _noisy(model, x_true, y_true, measurement_rng(seed, k), noise)
            step_cost = generation_cost(case_k, u, _slack_p(case_k, x_true, y_true))
            cumulative += step_cost

            x_s, belief = mle_update(case_k, belief, u, eta, noise,
                                     paper_strict=config.paper_strict_sensitivity, history=history)
            if history is not None:
                history = history.add(case_k, u, eta)
            trace = belief.trace_of_covariance()
            if trace > previous_trace * (1 + TRACE_RTOL):
                raise InformationDecrease(
                    f"Tr(V) increased from {previous_trace:.6g} to {trace:.6g} at step {k}")
            previous_trace = trace
            mre_g, mre_b = mean_relative_errors(belief.mean, y_true)

            summary.records.append(IterationRecord(
                k=k, strategy=strategy, rho=applied_rho, u=u.copy(), eta=eta,
                estimate=belief.mean.copy(), trace_v=trace, step_cost=step_cost,
                cumulative_cost=cumulative, mre_g=mre_g, mre_b=mre_b,
                wall_time=time.perf_counter() - started,
                grid_hours=k * config.sampling_minutes / 60.0,
            ))
            report(int(100 * k / horizon),
                   f"[{strategy} seed {seed}] step {k}: Tr(V)={trace:.6g} cost={step_cost:.6g} "
                   f"MRE g={mre_g:.4f} b={mre_b:.4f}")

            if trace < config.termination_eps:
                summary.reason = "eps_tolerance"
                break
            if trace <= config.target_variance_trace:
                summary.reason = "target_reached"
                break
            if k == horizon:
                summary.reason = "horizon"
                break

            if autotuned:
                if controller is None or _refit_due(config, controller, k, last_fit_k):
                    fit = _calibrated_fit(case_k, belief, config, (x_s, u), workers)
                    last_fit_k = k
                    if controller is None:
                        controller = RhoController.initialize(
                            fit, rho, horizon, config.target_variance_trace, initial_trace, k=k,
                            rho_bounds=config.rho_bounds, gain_mode=config.gain_mode)
                    elif fit is not None:
                        controller = controller.with_fit(fit)
                controller = rho_update(controller, trace)
                rho = controller.rho

            decision = solve_decision(case_k, DecisionProblemSpec(
                kind=kind, belief=belief, noise=noise, rho=rho,
                input_change_weight=config.input_change_weight, previous_input=u,
                warm_start=(x_s, u), paper_strict=config.paper_strict_sensitivity,
            ))
            u = decision.u
            applied_rho = rho
    except OedOpfError as err:
        logger.error("[%s seed %s] run aborted after %d steps: %s",
                     strategy, seed, len(summary.records), err)
        summary.reason = "aborted"
        summary.error = str(err)

    logger.info("[%s seed %s] finished: %s after %d steps (%.2f h grid time), cumulative cost %.6g",
                strategy, seed, summary.reason, summary.terminated_at, summary.grid_hours,
                summary.cumulative_cost)
    return summary


def first_step_belief(case, config, seed=None):
    """
    Belief after the first measurement of a run (OPF set-point at the prior
    mean), the point at which the autotuned strategy sweeps rho.

    Returns (belief, estimated state, applied input).
    """
    seed = config.rng_seed if seed is None else seed
    y_true = config.true_param_array()
    if y_true is None:
        y_true = case.nominal_params()
    y0 = config.initial_param_array()
    if y0 is None:
        y0 = prior_mean(case)
    belief = Belief.from_variance(y0, config.prior_variance)
    u = solve_decision(case, DecisionProblemSpec(
        kind="opf", belief=belief, noise=config.noise_variance,
        paper_strict=config.paper_strict_sensitivity)).u
    x_true = true_operating_point(case, y_true, u)
    eta = _noisy(grid_model(case), x_true, y_true, measurement_rng(seed, 1), config.noise_variance)
    x_s, belief = mle_update(case, belief, u, eta, config.noise_variance,
                             paper_strict=config.paper_strict_sensitivity)
    return belief, x_s, u


def _run_one(job):
    case, config, seed = job
    return run_algorithm(case, config, seed=seed, workers=1)


def run_batch(case, config, seeds, strategies=None, workers=None, progress_callback=None):
    """
    Run every (strategy, seed) pair, one run per worker process.

    Returns a dict keyed by (strategy, seed).
    """
    strategies = list(strategies or STRATEGIES)
    jobs = [(case, replace(config, strategy=s), seed) for s in strategies for seed in seeds]
    results = {}
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for i, summary in enumerate(pool.map(_run_one, jobs)):
            results[(summary.strategy, summary.seed)] = summary
            if progress_callback:
                progress_callback(int(100 * (i + 1) / len(jobs)),
                                  f"Finished {summary.strategy} seed {summary.seed}")
    return results


Comparison = namedtuple("Comparison", ["table", "trace_curve", "horizon"])


def compare_strategies(summaries):
    """
    Median statistics per strategy over a batch.

    The common horizon is the shortest run that was not aborted; aborted
    runs are counted in ``aborted`` and only enter the cost median when
    they lasted at least that long. ``table`` holds the median cumulative
    cost at the common horizon, median final Tr(V) and MREs and the fraction
    of runs that reached the target; ``trace_curve`` the median Tr(V) per
    step.
    """
    summaries = [s for s in summaries if s.records]
    if not summaries:
        raise ValueError("no run produced any records")
    completed = [s for s in summaries if s.reason != "aborted"]
    horizon = min(s.terminated_at for s in (completed or summaries))

    rows, curves = [], {}
    for strategy in sorted({s.strategy for s in summaries}):
        runs = [s for s in summaries if s.strategy == strategy]
        reaching = [s for s in runs if s.terminated_at >= horizon]
        cost = (float(np.median([s.records[horizon - 1].cumulative_cost for s in reaching]))
                if reaching else float("nan"))
        rows.append({
            "strategy": strategy,
            "runs": len(runs),
            "aborted": sum(s.reason == "aborted" for s in runs),
            "cost_at_horizon": cost,
            "final_trace_v": float(np.median([s.records[-1].trace_v for s in runs])),
            "mre_g": float(np.median([s.records[-1].mre_g for s in runs])),
            "mre_b": float(np.median([s.records[-1].mre_b for s in runs])),
            "target_reached": float(np.mean([s.reason == "target_reached" for s in runs])),
        })
        longest = max(s.terminated_at for s in runs)
        curves[strategy] = [
            float(np.median([s.records[k].trace_v for s in runs if s.terminated_at > k]))
            for k in range(longest)
        ]
    table = pd.DataFrame(rows).set_index("strategy")
    trace_curve = pd.DataFrame({name: pd.Series(values, index=range(1, len(values) + 1))
                                for name, values in curves.items()})
    trace_curve.index.name = "k"
    return Comparison(table=table, trace_curve=trace_curve, horizon=horizon)


def records_frame(summary):
    """
    One row per IterationRecord. Column order: k, strategy, rho, trace_v,
    step_cost, cumulative_cost, mre_g, mre_b, wall_time, grid_hours, then
    u_*, eta_* and y_* vector entries.
    """
    rows = []
    for rec in summary.records:
        row = {name: getattr(rec, name) for name in RECORD_COLUMNS}
        row.update({f"u_{i}": v for i, v in enumerate(rec.u)})
        row.update({f"eta_{i}": v for i, v in enumerate(rec.eta)})
        row.update({f"y_{i}": v for i, v in enumerate(rec.estimate)})
        rows.append(row)
    return pd.DataFrame(rows)


def write_records_csv(summary, path):
    records_frame(summary).to_csv(path, index=False, float_format="%.17g")


def write_summary_json(summary, path, case=None):
    document = summary.to_dict()
    if case is not None and summary.records:
        document["lines"] = summary.line_rows(case)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(document, handle, indent=2)


def record_dict(record):
    """Plain-Python view of an IterationRecord for JSON output."""
    data = asdict(record)
    for key in ("u", "eta", "estimate"):
        data[key] = [float(v) for v in data[key]]
    for key in ("trace_v", "step_cost", "cumulative_cost", "mre_g", "mre_b", "wall_time", "grid_hours"):
        data[key] = float(data[key])
    return data


def write_records_json(summary, path):
    with open(path, "w", encoding="utf-8") as handle:
        json.dump([record_dict(rec) for rec in summary.records], handle, indent=2)
