"""
Prior-regularized maximum-likelihood estimation of the line parameters.

    minimize  1/2 |M(x, y) - eta|^2_{Sigma^-1} + 1/2 |y - y_hat|^2_{P}
    subject to S(x, y) = u_hat - d,  x within its operating bounds

where P is the prior information matrix. The belief is kept in information
form so that a vacuous prior (variance 1e20) is a tiny PSD matrix instead of
a huge covariance.

The batch form stacks one state block and one power-flow constraint block
per measurement and re-estimates y from every measurement taken so far
against the initial prior.
"""

import logging
from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np
import scipy.linalg

from src import nlp_core
from src.errors import (
    DimensionMismatch,
    InformationDecrease,
    NLPFailure,
    NotPositiveDefinite,
    PowerFlowError,
)
from src.grid_core import grid_model
from src.oed_core import FisherMatrix, noise_variances, sensitivity
from src.pf_solver import solve_power_flow

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
# state bounds are widened by this fraction when the measured point violates them
BOUND_RELAXATION = 0.5


@dataclass(frozen=True, eq=False)
class Belief:
    """Gaussian belief over y: mean and information (inverse covariance)."""
    mean: np.ndarray
    information: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        info = np.array(self.information, dtype=float)
        if info.shape != (mean.size, mean.size):
            raise DimensionMismatch(
                f"information has shape {info.shape}, expected ({mean.size}, {mean.size})")
        scale = max(1.0, np.max(np.abs(info), initial=0.0))
        if np.max(np.abs(info - info.T), initial=0.0) > SYMMETRY_TOL * scale:
            raise NotPositiveDefinite("belief information is not symmetric")
        info = 0.5 * (info + info.T)
        if mean.size and np.linalg.eigvalsh(info).min() < -SYMMETRY_TOL * scale:
            raise NotPositiveDefinite("belief information has a negative eigenvalue")
        mean.setflags(write=False)
        info.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "information", info)

    @classmethod
    def from_variance(cls, mean, variance):
        """Isotropic prior with the given scalar variance."""
        mean = np.asarray(mean, dtype=float)
        return cls(mean=mean, information=np.eye(mean.size) / float(variance))

    def trace_of_covariance(self):
        return FisherMatrix(self.information).trace_of_inverse()


def _information_root(information):
    """R with R^T R = information, from the symmetric eigendecomposition."""
    eig, vec = scipy.linalg.eigh(information)
    return (vec * np.sqrt(np.clip(eig, 0.0, None))).T


def _measured_state_outside(model, eta, lower, upper):
    v = eta[:model.n_state][0::2]
    return bool(np.any(v < lower[0::2]) or np.any(v > upper[0::2]))


@dataclass(frozen=True, eq=False)
class MeasurementHistory:
    """
    Cases (demand may change between steps), inputs and measurements
    gathered so far, with the prior held before the first of them. A batch
    update re-estimates y from all of them at once.
    """
    prior: Belief
    cases: Tuple = ()
    inputs: Tuple[np.ndarray, ...] = ()
    measurements: Tuple[np.ndarray, ...] = ()

    def __len__(self):
        return len(self.inputs)

    def add(self, case, u, eta):
        u = np.array(u, dtype=float)
        eta = np.array(eta, dtype=float)
        return replace(self, cases=self.cases + (case,), inputs=self.inputs + (u,),
                       measurements=self.measurements + (eta,))


def _start_state(case, y, u, eta, nx):
    try:
        return solve_power_flow(case, y, u).x
    except PowerFlowError as err:
        logger.debug("power flow at the current estimate failed (%s); starting from measured state", err)
        return eta[:nx].copy()


def _estimate(cases, prior, y_start, inputs, measurements, noise, options):
    """
    Maximum-likelihood states (one per measurement) and parameters.

    Variables are (x_1, ..., x_K, y); each measurement contributes its own
    power-flow equality block and weighted residual block.
    """
    model = grid_model(cases[-1])
    nx, ny = model.n_state, model.n_params
    K = len(inputs)
    weights_root = 1.0 / np.sqrt(noise_variances(noise, model.n_measurements))
    prior_root = _information_root(prior.information)
    prior_mean = prior.mean
    targets = [u - grid_model(case).demand_vector() for case, u in zip(cases, inputs)]

    x_lo, x_hi = model.state_bounds()
    lower, upper, starts = [], [], []
    for j, eta in enumerate(measurements):
        lo, hi = x_lo, x_hi
        if _measured_state_outside(model, eta, x_lo, x_hi):
            logger.log(logging.WARNING if j == K - 1 else logging.DEBUG,
                       "measured voltages violate the operating bounds; relaxing state bounds by %d%%",
                       int(BOUND_RELAXATION * 100))
            lo, hi = model.state_bounds(relax=BOUND_RELAXATION)
        lower.append(lo)
        upper.append(hi)
        starts.append(_start_state(cases[j], y_start, inputs[j], eta, nx))
    lower = np.concatenate(lower + [np.full(ny, -np.inf)])
    upper = np.concatenate(upper + [np.full(ny, np.inf)])

    def split(z):
        return [z[j * nx:(j + 1) * nx] for j in range(K)], z[K * nx:]

    def residuals(z):
        states, y = split(z)
        rows = K * model.n_measurements + ny
        r = np.zeros(rows)
        jr = np.zeros((rows, z.size))
        for j, x in enumerate(states):
            jac = model.jacobians(x, y)
            block = slice(j * model.n_measurements, (j + 1) * model.n_measurements)
            r[block] = weights_root * (model.measurement(x, y) - measurements[j])
            jr[block, j * nx:(j + 1) * nx] = weights_root[:, None] * jac.dM_dx
            jr[block, K * nx:] = weights_root[:, None] * jac.dM_dy
        r[K * model.n_measurements:] = prior_root @ (y - prior_mean)
        jr[K * model.n_measurements:, K * nx:] = prior_root
        return r, jr

    def equalities(z):
        states, y = split(z)
        c = np.zeros(K * nx)
        jc = np.zeros((K * nx, z.size))
        for j, x in enumerate(states):
            jac = model.jacobians(x, y)
            block = slice(j * nx, (j + 1) * nx)
            c[block] = model.residual_injection(x, y) - targets[j]
            jc[block, block] = jac.dS_dx
            jc[block, K * nx:] = jac.dS_dy
        return c, jc

    z0 = np.clip(np.concatenate(starts + [y_start]), lower, upper)
    problem = nlp_core.NLPProblem(
        n=z0.size, z0=z0, residuals=residuals, equalities=equalities, lower=lower, upper=upper)
    solution = nlp_core.solve(problem, options)
    if solution.status != nlp_core.OPTIMAL:
        opts = options or nlp_core.NLPOptions()
        if solution.status == nlp_core.FAILURE or solution.constraint_violation > np.sqrt(opts.tol):
            raise NLPFailure(
                f"estimation problem failed: {solution.message} "
                f"(violation {solution.constraint_violation:.3e})")
        logger.warning("estimation stopped at %s with kkt residual %.3e; accepting the iterate",
                       solution.status, solution.kkt_residual)
    logger.debug("estimation over %d measurements: objective %.6g after %d outer iterations",
                 K, solution.objective_value, solution.iterations)
    states, y = split(solution.z)
    return states, y.copy()


def mle_update(case, belief, u_hat, eta, noise, paper_strict=False, options=None, history=None):
    """
    One measurement update of the belief.

    Without ``history`` the estimate weighs the new measurement against the
    current belief. With ``history`` (the measurements before this one) the
    estimate is re-solved over all measurements against ``history.prior``,
    starting from the current mean.

    Returns the estimated state x_s and the new Belief whose mean is the
    estimate and whose information adds the measurement information
    M_p^T Sigma^-1 M_p evaluated at (x_s, new mean).
    """
    model = grid_model(case)
    u_hat = model.check_input(u_hat)
    eta = np.asarray(eta, dtype=float)
    if eta.shape != (model.n_measurements,):
        raise DimensionMismatch(f"measurement has shape {eta.shape}, expected ({model.n_measurements},)")
    y_hat = model.check_params(belief.mean)

    if history is None:
        prior, cases, inputs, measurements = belief, [case], [u_hat], [eta]
    else:
        prior = history.prior
        cases = list(history.cases) + [case]
        inputs = [model.check_input(u) for u in history.inputs] + [u_hat]
        measurements = list(history.measurements) + [eta]
    states, y_new = _estimate(cases, prior, y_hat, inputs, measurements, noise, options)

    x_s = states[-1].copy()
    weights = 1.0 / noise_variances(noise, model.n_measurements)
    m_p = sensitivity(case, x_s, u_hat, y_new, paper_strict)
    gain = m_p.T @ (weights[:, None] * m_p)
    gain = 0.5 * (gain + gain.T)
    eig_min = np.linalg.eigvalsh(gain).min()
    if eig_min < -SYMMETRY_TOL * max(1.0, np.max(np.abs(gain))):
        raise InformationDecrease(f"measurement information has a negative eigenvalue ({eig_min:.3e})")
    return x_s, Belief(mean=y_new, information=belief.information + gain)
