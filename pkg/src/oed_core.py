"""
Parameter sensitivities, Fisher information and the three decision problems
(economic dispatch, pure experiment design and the weighted combination).

A-optimality throughout: the design criterion is Tr(F^-1), the trace of the
predicted parameter covariance.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

from src import nlp_core
from src.errors import (
    DimensionMismatch,
    Infeasible,
    NLPFailure,
    NotPositiveDefinite,
    PowerFlowError,
    SingularJacobian,
)
from src.grid_core import grid_model
from src.pf_solver import solve_power_flow

logger = logging.getLogger(__name__)

KINDS = ("opf", "oed", "oed_opf")

# measurement variances below this are treated as this (zero-noise simulations)
MIN_VARIANCE = 1e-10
PRIOR_REGULARIZATION = 1e-12
SYMMETRY_TOL = 1e-10
FD_STEP = 1e-6
# a max_iter NLP result this close to feasible is still used
ACCEPT_VIOLATION = 1e-4


def noise_variances(noise, size):
    """Per-channel measurement variances from a scalar or a vector."""
    variances = np.broadcast_to(np.asarray(noise, dtype=float), (size,)).copy()
    if np.any(variances < 0) or not np.all(np.isfinite(variances)):
        raise ValueError("measurement variances must be finite and non-negative")
    return np.maximum(variances, MIN_VARIANCE)


def _factor_state_jacobian(dS_dx):
    try:
        lu, piv = scipy.linalg.lu_factor(dS_dx)
    except (ValueError, np.linalg.LinAlgError) as err:
        raise SingularJacobian(f"dS/dx could not be factored: {err}") from err
    diag = np.abs(np.diag(lu))
    if diag.min() <= 1e-14 * max(diag.max(), 1.0):
        raise SingularJacobian("dS/dx is singular at this operating point")
    return lu, piv


def sensitivity(case, x, u, y_hat, paper_strict=False):
    """
    Total derivative of the measurement with respect to the line parameters
    along the power-flow manifold:

        M_p = dM/dy - dM/dx (dS/dx)^-1 dS/dy

    With ``paper_strict`` the direct dM/dy term is dropped.
    """
    model = grid_model(case)
    if u is not None:
        model.check_input(u)
    jac = model.jacobians(x, y_hat)
    factor = _factor_state_jacobian(jac.dS_dx)
    dx_dy = -scipy.linalg.lu_solve(factor, jac.dS_dy)
    m_p = jac.dM_dx @ dx_dy
    if not paper_strict:
        m_p = m_p + jac.dM_dy
    return m_p


class FisherMatrix:
    """
    Symmetric information matrix F with a cached Cholesky factor.

    Tr(F^-1) is computed as the squared Frobenius norm of L^-1, never through
    an explicit inverse.
    """

    def __init__(self, matrix):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise DimensionMismatch(f"information matrix must be square, got {matrix.shape}")
        asym = np.max(np.abs(matrix - matrix.T), initial=0.0)
        if asym > SYMMETRY_TOL * max(1.0, np.max(np.abs(matrix), initial=0.0)):
            raise NotPositiveDefinite(f"information matrix is not symmetric (max deviation {asym:.3e})")
        self.matrix = 0.5 * (matrix + matrix.T)
        self._cholesky = None
        self._trace_inv = None

    @property
    def size(self):
        return self.matrix.shape[0]

    def cholesky(self):
        if self._cholesky is None:
            try:
                self._cholesky = scipy.linalg.cholesky(self.matrix, lower=True)
            except np.linalg.LinAlgError as err:
                raise NotPositiveDefinite("information matrix is not positive definite") from err
        return self._cholesky

    def solve(self, rhs):
        return scipy.linalg.cho_solve((self.cholesky(), True), rhs)

    def trace_of_inverse(self):
        if self._trace_inv is None:
            l_inv = scipy.linalg.solve_triangular(self.cholesky(), np.eye(self.size), lower=True)
            self._trace_inv = float(np.sum(l_inv ** 2))
        return self._trace_inv

    def covariance(self):
        return self.solve(np.eye(self.size))

    def is_psd(self, tol=1e-10):
        eig = np.linalg.eigvalsh(self.matrix)
        return bool(eig.min() >= -tol * max(1.0, abs(eig.max())))


def fisher(belief, m_p, noise):
    """F = prior information + M_p^T Sigma^-1 M_p."""
    m_p = np.asarray(m_p, dtype=float)
    info = np.asarray(belief.information, dtype=float)
    if m_p.ndim != 2 or m_p.shape[1] != info.shape[0]:
        raise DimensionMismatch(
            f"sensitivity has shape {m_p.shape}, prior information has size {info.shape[0]}")
    weights = 1.0 / noise_variances(noise, m_p.shape[0])
    return FisherMatrix(info + m_p.T @ (weights[:, None] * m_p))


def regularized_information(information):
    """Prior information plus eps*I so that F stays positive definite."""
    information = np.asarray(information, dtype=float)
    eps = PRIOR_REGULARIZATION * max(1.0, np.linalg.norm(information))
    return information + eps * np.eye(information.shape[0])


def trace_gradient(case, x, y_hat, information, noise, paper_strict=False):
    """
    Tr(F(x)^-1) and its gradient with respect to the state.

    Uses dTr(F^-1) = -Tr(F^-1 dF F^-1); the derivative of M_p along each
    state direction is taken by central differences of the analytic M_p.
    """
    x = np.asarray(x, dtype=float)
    m_p = sensitivity(case, x, None, y_hat, paper_strict)
    weights = 1.0 / noise_variances(noise, m_p.shape[0])
    fim = FisherMatrix(information + m_p.T @ (weights[:, None] * m_p))
    trace = fim.trace_of_inverse()

    # G = W M_p F^-2
    g_mat = weights[:, None] * fim.solve(fim.solve(m_p.T)).T
    grad = np.zeros_like(x)
    for i in range(x.size):
        h = FD_STEP * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        dm_p = (sensitivity(case, x + e, None, y_hat, paper_strict)
                - sensitivity(case, x - e, None, y_hat, paper_strict)) / (2 * h)
        grad[i] = -2.0 * np.sum(g_mat * dm_p)
    return trace, grad


def reduced_trace_gradient(case, x, y_hat, information, noise, paper_strict=False):
    """dTr(F^-1)/du through the power-flow map x(u): (dS/dx)^-T dTr/dx."""
    trace, grad_x = trace_gradient(case, x, y_hat, information, noise, paper_strict)
    jac = grid_model(case).jacobians(x, y_hat)
    factor = _factor_state_jacobian(jac.dS_dx)
    return trace, scipy.linalg.lu_solve(factor, grad_x, trans=1)


def _slack_generation(model, x, y):
    p_d, q_d = model.slack_demand()
    p, q = model.slack_injection(x, y)
    return p + p_d, q + q_d


def generation_cost(case, u, slack_p):
    """Quadratic generation cost sum(alpha*P^2 + beta*P) with P in MW, slack generator included."""
    model = grid_model(case)
    u = np.asarray(u, dtype=float)
    base = case.base_power
    total = 0.0
    for gen in case.generators:
        if gen.bus - 1 == model.slack:
            p = slack_p
        else:
            k = model.control_buses.index(gen.bus)
            p = u[model.control_cols[2 * k]]
        mw = p * base
        total += gen.alpha * mw ** 2 + gen.beta * mw
    return float(total)


@dataclass
class DecisionProblemSpec:
    """
    One decision problem. ``rho`` is used by kind ``oed_opf``;
    ``input_change_weight`` and ``previous_input`` by kind ``oed``.
    """
    kind: str
    belief: object
    noise: object = 1e-4
    rho: Optional[float] = None
    input_change_weight: float = 0.1
    previous_input: Optional[np.ndarray] = None
    warm_start: Optional[Tuple[np.ndarray, np.ndarray]] = None
    paper_strict: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown decision problem kind '{self.kind}', expected one of {KINDS}")
        if self.kind == "oed_opf" and not (self.rho is not None and self.rho > 0):
            raise ValueError(f"kind 'oed_opf' needs rho > 0, got {self.rho}")
        if self.input_change_weight < 0:
            raise ValueError("input_change_weight must be non-negative")


@dataclass
class DecisionResult:
    x: np.ndarray
    u: np.ndarray
    cost: float
    trace_v: float
    status: str
    objective_value: float
    iterations: int = 0


def default_input(case, y):
    """
    Starting set-point: active demand shared in proportion to p_max, reactive
    demand in proportion to q_max, then a power-flow solve for the state.
    """
    model = grid_model(case)
    p_total = sum(bus.p_d for bus in case.buses)
    q_total = sum(bus.q_d for bus in case.buses)
    p_cap = sum(max(gen.p_max, 0.0) for gen in case.generators) or 1.0
    q_cap = sum(max(gen.q_max, 0.0) for gen in case.generators) or 1.0
    generation = {
        gen.bus: (p_total * max(gen.p_max, 0.0) / p_cap, q_total * max(gen.q_max, 0.0) / q_cap)
        for gen in case.generators
    }
    u = model.input_from_generation(generation)
    lo, hi = model.control_bounds()
    u[model.control_cols] = np.clip(u[model.control_cols], lo, hi)
    try:
        x = solve_power_flow(case, y, u).x
    except PowerFlowError as err:
        logger.debug("default set-point power flow failed (%s); using flat state", err)
        x = model.flat_state()
    return x, u


class _DecisionProblem:
    """Objective and constraints over z = (x, controllable entries of u)."""

    def __init__(self, case, spec):
        self.case = case
        self.spec = spec
        self.model = model = grid_model(case)
        self.y = model.check_params(spec.belief.mean)
        self.nx = model.n_state
        self.nc = len(model.control_cols)
        self.information = regularized_information(spec.belief.information)
        self.base = case.base_power
        self.demand = model.demand_vector()

        # columns of z holding controllable active powers and their cost coefficients
        self.p_cols = self.nx + np.arange(0, self.nc, 2)
        gens = [case.generator_at(bus) for bus in model.control_buses]
        self.alpha = np.array([gen.alpha for gen in gens])
        self.beta = np.array([gen.beta for gen in gens])
        slack_gen = model.slack_generator
        if slack_gen is None:
            self.slack_limits = (0.0, 0.0, 0.0, 0.0)
            self.slack_cost = (0.0, 0.0)
        else:
            self.slack_limits = (slack_gen.p_min, slack_gen.p_max, slack_gen.q_min, slack_gen.q_max)
            self.slack_cost = (slack_gen.alpha, slack_gen.beta)

        if spec.previous_input is not None:
            self.p_prev = model.controls(spec.previous_input)[0::2]
        else:
            self.p_prev = None

        x_lo, x_hi = model.state_bounds()
        u_lo, u_hi = model.control_bounds()
        self.lower = np.concatenate([x_lo, u_lo])
        self.upper = np.concatenate([x_hi, u_hi])
        if np.any(self.lower > self.upper):
            raise Infeasible("generator or voltage bounds are inconsistent (lower > upper)")

    def split(self, z):
        return z[:self.nx], z[self.nx:]

    def equalities(self, z):
        x, uc = self.split(z)
        u = self.model.input_from_controls(uc)
        residual = self.model.residual_injection(x, self.y) - u + self.demand
        jac = np.zeros((self.nx, self.nx + self.nc))
        jac[:, :self.nx] = self.model.jacobians(x, self.y).dS_dx
        jac[self.model.control_cols, self.nx + np.arange(self.nc)] = -1.0
        return residual, jac

    def inequalities(self, z):
        x, _ = self.split(z)
        p1, q1 = _slack_generation(self.model, x, self.y)
        d_x, _ = self.model.slack_jacobian(x, self.y)
        p_min, p_max, q_min, q_max = self.slack_limits
        values = np.array([p1 - p_max, p_min - p1, q1 - q_max, q_min - q1])
        jac = np.zeros((4, self.nx + self.nc))
        jac[0, :self.nx], jac[1, :self.nx] = d_x[0], -d_x[0]
        jac[2, :self.nx], jac[3, :self.nx] = d_x[1], -d_x[1]
        return values, jac

    def cost(self, z):
        x, uc = self.split(z)
        base = self.base
        p = uc[0::2]
        p1, _ = _slack_generation(self.model, x, self.y)
        a1, b1 = self.slack_cost
        value = np.sum(self.alpha * (p * base) ** 2 + self.beta * p * base)
        value += a1 * (p1 * base) ** 2 + b1 * p1 * base
        grad = np.zeros_like(z)
        grad[self.p_cols] = 2 * self.alpha * base ** 2 * p + self.beta * base
        d_x, _ = self.model.slack_jacobian(x, self.y)
        grad[:self.nx] = (2 * a1 * base ** 2 * p1 + b1 * base) * d_x[0]
        return float(value), grad

    def trace(self, z):
        x, _ = self.split(z)
        value, grad_x = trace_gradient(
            self.case, x, self.y, self.information, self.spec.noise, self.spec.paper_strict)
        grad = np.zeros_like(z)
        grad[:self.nx] = grad_x
        return value, grad

    def input_change(self, z):
        grad = np.zeros_like(z)
        if self.p_prev is None or self.spec.input_change_weight == 0:
            return 0.0, grad
        c = self.spec.input_change_weight
        delta = z[self.p_cols] - self.p_prev
        grad[self.p_cols] = 2 * c * delta
        return float(c * delta @ delta), grad

    def objective(self, z):
        kind = self.spec.kind
        if kind == "opf":
            return self.cost(z)
        if kind == "oed":
            trace, d_trace = self.trace(z)
            change, d_change = self.input_change(z)
            return trace + change, d_trace + d_change
        cost, d_cost = self.cost(z)
        trace, d_trace = self.trace(z)
        return cost + trace / self.spec.rho, d_cost + d_trace / self.spec.rho


def solve_decision(case, spec, options=None):
    """
    Solve the decision problem ``spec`` for the set-point u and state x.

    The returned state is re-solved from the power-flow equations at u*, so
    S(x*, y) = u* - d holds to power-flow tolerance. Cost and Tr(V) are
    reported for every kind.
    """
    problem = _DecisionProblem(case, spec)
    model = problem.model

    if spec.warm_start is not None:
        x0, u0 = (np.asarray(a, dtype=float) for a in spec.warm_start)
    else:
        x0, u0 = default_input(case, problem.y)
    z0 = np.clip(np.concatenate([x0, model.controls(u0)]), problem.lower, problem.upper)

    f0, _ = problem.objective(z0)
    scale = max(1.0, abs(f0))

    def objective(z):
        value, grad = problem.objective(z)
        return value / scale, grad / scale

    nlp = nlp_core.NLPProblem(
        n=z0.size, z0=z0, objective=objective,
        equalities=problem.equalities, inequalities=problem.inequalities,
        lower=problem.lower, upper=problem.upper,
    )
    solution = nlp_core.solve(nlp, options)
    if solution.status != nlp_core.OPTIMAL:
        if solution.status == nlp_core.FAILURE or solution.constraint_violation > ACCEPT_VIOLATION:
            raise NLPFailure(
                f"{spec.kind} decision problem failed: {solution.message} "
                f"(violation {solution.constraint_violation:.3e})")
        logger.warning("%s decision problem stopped at %s with kkt residual %.3e; using the iterate",
                       spec.kind, solution.status, solution.kkt_residual)

    x_nlp, uc = problem.split(solution.z)
    u = model.input_from_controls(uc)
    try:
        x = solve_power_flow(case, problem.y, u, warm_start=x_nlp).x
    except PowerFlowError as err:
        logger.debug("power-flow polish after %s solve failed (%s)", spec.kind, err)
        x = x_nlp

    p1, _ = _slack_generation(model, x, problem.y)
    cost = generation_cost(case, u, p1)
    m_p = sensitivity(case, x, u, problem.y, spec.paper_strict)
    weights = 1.0 / noise_variances(spec.noise, m_p.shape[0])
    trace_v = FisherMatrix(problem.information + m_p.T @ (weights[:, None] * m_p)).trace_of_inverse()
    logger.debug("%s decision: cost %.6g, Tr(V) %.6g, %d outer iterations",
                 spec.kind, cost, trace_v, solution.iterations)
    return DecisionResult(
        x=x, u=u, cost=cost, trace_v=trace_v, status=solution.status,
        objective_value=solution.objective_value * scale, iterations=solution.iterations,
    )
