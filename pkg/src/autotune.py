"""
Automatic tuning of the cost / information weight rho.

A sweep over rho maps out the trade-off between generation cost and
predicted variance; its Pareto front is fitted with

    rho ~ a * exp(-lam * I^2),    I = 1 / Tr(V)

and the derivative of that fit serves as the feedback gain of the rho update
that steers the information gathered per step towards what the remaining
horizon requires.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from src.errors import (
    AllSolvesFailed,
    DegenerateFit,
    HorizonExhausted,
    InsufficientSamples,
    OedOpfError,
)
from src.oed_core import DecisionProblemSpec, solve_decision

logger = logging.getLogger(__name__)

RHO_MIN = 1e-8
RHO_MAX = 1e8
MIN_FIT_SAMPLES = 3
# RMS log-space residual above which a fit is reported as poor
FIT_WARNING_RESIDUAL = 0.5
# largest change of log rho in one update (one decade)
MAX_LOG_STEP = math.log(10.0)
SWEEP_COLUMNS = ["rho", "cost", "trace_v", "filtered"]


@dataclass(frozen=True)
class TradeoffSample:
    rho: float
    cost: float
    trace_v: float

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if not self.trace_v > 0:
            raise ValueError(f"trace_v must be positive, got {self.trace_v}")

    @property
    def information(self):
        return 1.0 / self.trace_v


@dataclass(frozen=True)
class InverseTradeoffFit:
    """
    rho = amplitude * exp(-decay * I^2) over the information I = 1/Tr(V).

    ``info_range`` and ``rho_range`` span the samples the fit was made on;
    outside them the curve is an extrapolation.
    """
    amplitude: float
    decay: float
    residual: float = 0.0
    info_range: Optional[Tuple[float, float]] = None
    rho_range: Optional[Tuple[float, float]] = None

    def __call__(self, information):
        return self.amplitude * np.exp(-self.decay * np.square(information))

    def derivative(self, information):
        return -2.0 * self.decay * information * self(information)

    def log_slope(self, information):
        """|d log rho / dI| at ``information`` clipped into the fitted range."""
        if self.info_range is not None:
            information = float(np.clip(information, *self.info_range))
        return 2.0 * self.decay * abs(information)

    @property
    def poor(self):
        return self.residual > FIT_WARNING_RESIDUAL


def operating_range(fit, rho_bounds):
    """Configured rho bounds narrowed to the rho values the fit was made on."""
    low, high = rho_bounds
    if fit is not None and fit.rho_range is not None:
        low, high = max(low, fit.rho_range[0]), min(high, fit.rho_range[1])
        if low > high:
            low, high = rho_bounds
    return float(low), float(high)


@dataclass(frozen=True)
class RhoController:
    rho: float
    i0: float
    fit: Optional[InverseTradeoffFit]
    horizon: int
    target_trace: float
    k: int = 0
    rho_min: float = RHO_MIN
    rho_max: float = RHO_MAX
    gain_mode: str = "information"
    last_information: Optional[float] = None
    rho_bounds: Tuple[float, float] = (RHO_MIN, RHO_MAX)
    max_log_step: float = MAX_LOG_STEP

    @classmethod
    def initialize(cls, fit, rho, horizon, target_trace, initial_trace, k=0,
                   rho_bounds=(RHO_MIN, RHO_MAX), gain_mode="information", max_log_step=MAX_LOG_STEP):
        """
        Controller at step ``k`` with the required mean information gain per
        step I0 = (1/N) (1/target - 1/Tr(V0)). rho is kept inside the
        configured bounds and inside the rho range of the fitted samples.
        """
        i0 = (1.0 / target_trace - 1.0 / initial_trace) / horizon
        rho_min, rho_max = operating_range(fit, rho_bounds)
        return cls(rho=float(np.clip(rho, rho_min, rho_max)), i0=i0, fit=fit, horizon=horizon,
                   target_trace=target_trace, k=k, rho_min=rho_min, rho_max=rho_max,
                   gain_mode=gain_mode, rho_bounds=tuple(rho_bounds), max_log_step=max_log_step)

    def with_fit(self, fit):
        rho_min, rho_max = operating_range(fit, self.rho_bounds)
        return replace(self, fit=fit, rho_min=rho_min, rho_max=rho_max,
                       rho=float(np.clip(self.rho, rho_min, rho_max)))

    @property
    def needs_refit(self):
        return self.fit is None or self.fit.poor


def rho_update(ctrl, trace_v_plus):
    """
    Feedback update of rho from the current predicted variance.

    I+ = (1/(N-k)) (1/target - 1/Tr(V+)) is the information still needed per
    remaining step and an information deficit (I+ > I0) lowers rho.

    In ``information`` mode the step is taken on log rho with the slope of
    the fitted curve at I+ (clipped into the fitted range), limited to
    ``max_log_step`` per update. Without a usable fit the step is the full
    ``max_log_step`` in the direction of the error. ``literal`` mode applies
    rho + phi'(I+) (I+ - I0) unchanged.
    """
    if ctrl.k >= ctrl.horizon:
        raise HorizonExhausted(f"rho update requested at step {ctrl.k} of a {ctrl.horizon}-step horizon")
    if not trace_v_plus > 0:
        raise ValueError(f"trace_v_plus must be positive, got {trace_v_plus}")

    i_plus = (1.0 / ctrl.target_trace - 1.0 / trace_v_plus) / (ctrl.horizon - ctrl.k)
    error = i_plus - ctrl.i0
    if ctrl.gain_mode == "literal" and ctrl.fit is not None:
        rho = ctrl.rho + ctrl.fit.derivative(i_plus) * error
    else:
        if ctrl.fit is None:
            step = -math.copysign(ctrl.max_log_step, error) if error else 0.0
        else:
            step = -ctrl.fit.log_slope(i_plus) * error
        step = float(np.clip(step, -ctrl.max_log_step, ctrl.max_log_step))
        rho = ctrl.rho * math.exp(step)
    if not math.isfinite(rho):
        rho = ctrl.rho if math.isnan(rho) else (ctrl.rho_max if rho > 0 else ctrl.rho_min)
    rho = float(np.clip(rho, ctrl.rho_min, ctrl.rho_max))
    logger.debug("rho update at k=%d: I+=%.6g I0=%.6g rho %.6g -> %.6g",
                 ctrl.k, i_plus, ctrl.i0, ctrl.rho, rho)
    return replace(ctrl, rho=rho, k=ctrl.k + 1, last_information=i_plus)


def pareto_sweep(case, belief, rho_grid, noise=1e-4, warm_start=None, paper_strict=False,
                 workers=None, progress_callback=None):
    """
    Solve the weighted decision problem once per rho.

    Args:
        case: GridCase to operate.
        belief: current Belief; its mean is the parameter estimate used.
        rho_grid: positive, non-decreasing weights.
        workers: thread count for the independent solves.
        progress_callback: optional callable(progress_pct, message).

    Returns:
        One TradeoffSample per successful solve, in grid order. Failed solves
        are dropped with a warning.
    """
    grid = [float(rho) for rho in rho_grid]
    if not grid:
        raise ValueError("rho grid is empty")
    if any(rho <= 0 for rho in grid) or any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("rho grid must be strictly positive and sorted ascending")

    def solve_one(rho):
        spec = DecisionProblemSpec(kind="oed_opf", belief=belief, noise=noise, rho=rho,
                                   warm_start=warm_start, paper_strict=paper_strict)
        try:
            result = solve_decision(case, spec)
        except OedOpfError as err:
            logger.warning("sweep solve at rho=%.3e failed: %s", rho, err)
            return None
        return TradeoffSample(rho=rho, cost=result.cost, trace_v=result.trace_v)

    samples = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for i, sample in enumerate(pool.map(solve_one, grid)):
            if sample is not None:
                samples.append(sample)
            if progress_callback:
                progress_callback(int(100 * (i + 1) / len(grid)), f"Sweep point {i + 1}/{len(grid)}")

    if not samples:
        raise AllSolvesFailed(f"all {len(grid)} sweep solves failed")
    logger.info("sweep finished: %d of %d solves succeeded", len(samples), len(grid))
    return samples


def pareto_filter(samples):
    """Non-dominated samples, sorted by trace_v ascending with cost strictly decreasing."""
    front = []
    best_cost = math.inf
    for sample in sorted(samples, key=lambda s: (s.trace_v, s.cost)):
        if sample.cost < best_cost:
            front.append(sample)
            best_cost = sample.cost
    return front


def fit_inverse_tradeoff(samples):
    """Least-squares fit of log rho = log a - lam * I^2 over the samples."""
    if len(samples) < MIN_FIT_SAMPLES:
        raise InsufficientSamples(f"need at least {MIN_FIT_SAMPLES} samples to fit, got {len(samples)}")
    info_sq = np.array([s.information for s in samples]) ** 2
    log_rho = np.log([s.rho for s in samples])
    if np.ptp(info_sq) <= 1e-12 * max(np.max(info_sq), 1e-300):
        raise DegenerateFit("all samples share the same variance; the decay rate is undetermined")

    design = np.column_stack([np.ones_like(info_sq), -info_sq])
    (log_a, decay), *_ = np.linalg.lstsq(design, log_rho, rcond=None)
    if not decay > 0:
        raise DegenerateFit(f"fitted decay rate is not positive ({decay:.6g})")
    residual = float(np.sqrt(np.mean((design @ np.array([log_a, decay]) - log_rho) ** 2)))
    if residual > FIT_WARNING_RESIDUAL:
        logger.warning("trade-off fit is poor: RMS log residual %.3f", residual)
    informations = [s.information for s in samples]
    rhos = [s.rho for s in samples]
    fit = InverseTradeoffFit(amplitude=float(np.exp(log_a)), decay=float(decay), residual=residual,
                             info_range=(min(informations), max(informations)),
                             rho_range=(min(rhos), max(rhos)))
    logger.info("trade-off fit: a=%.6g lambda=%.6g residual=%.3g", fit.amplitude, fit.decay, residual)
    return fit


def calibrate(case, belief, rho_grid, noise=1e-4, warm_start=None, paper_strict=False,
              workers=None, progress_callback=None):
    """Sweep, filter and fit in one go; returns (samples, front, fit)."""
    samples = pareto_sweep(case, belief, rho_grid, noise=noise, warm_start=warm_start,
                           paper_strict=paper_strict, workers=workers,
                           progress_callback=progress_callback)
    front = pareto_filter(samples)
    return samples, front, fit_inverse_tradeoff(front)


def sweep_frame(samples):
    front = set(id(s) for s in pareto_filter(samples))
    return pd.DataFrame(
        [(s.rho, s.cost, s.trace_v, id(s) in front) for s in samples],
        columns=SWEEP_COLUMNS,
    )


def write_sweep_csv(samples, path):
    """Write rho, cost, trace_v and the Pareto-front flag, one row per sample."""
    sweep_frame(samples).to_csv(path, index=False, float_format="%.17g")


def read_sweep_csv(path):
    frame = pd.read_csv(path)
    missing = [col for col in SWEEP_COLUMNS[:3] if col not in frame.columns]
    if missing:
        raise ValueError(f"sweep file {path} lacks columns {missing}")
    return [TradeoffSample(rho=float(r.rho), cost=float(r.cost), trace_v=float(r.trace_v))
            for r in frame.itertuples(index=False)]
