"""
Smooth constrained nonlinear programming to local optimality.

    minimize f(z)  subject to  c(z) = 0,  h(z) <= 0,  lower <= z <= upper

Method: a Powell-Hestenes-Rockafellar augmented Lagrangian outer loop. The
bound-constrained inner problems are handed to scipy:

* ``least_squares`` (trust-region Gauss-Newton) when the objective is given as
  residuals, f = 1/2 |r(z)|^2, since the augmented terms are then residuals too;
* ``L-BFGS-B`` otherwise.

Only first derivatives are required from callers.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.optimize

from src.errors import EvaluationFailure, Infeasible, MaxIterations

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
FAILURE = "failure"


@dataclass
class NLPProblem:
    """
    Callables return (values, derivative): the objective (f, gradient), the
    constraint blocks (vector, Jacobian). Either ``objective`` or ``residuals``
    must be given.
    """
    n: int
    z0: np.ndarray
    objective: Optional[Callable] = None
    equalities: Optional[Callable] = None
    inequalities: Optional[Callable] = None
    residuals: Optional[Callable] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None


@dataclass(frozen=True)
class NLPOptions:
    tol: float = 1e-6
    max_iter: int = 50
    inner_max_iter: int = 1000
    penalty0: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e12
    check_gradients: bool = False
    gradient_rtol: float = 1e-4


@dataclass
class NLPSolution:
    z: np.ndarray
    objective_value: float
    kkt_residual: float
    status: str
    eq_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ineq_multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    constraint_violation: float = 0.0
    iterations: int = 0
    penalty: float = 0.0
    message: str = ""

    @property
    def success(self):
        return self.status == OPTIMAL


class _Evaluator:
    """Wraps the user callables, checking shapes and finiteness."""

    def __init__(self, problem):
        if problem.objective is None and problem.residuals is None:
            raise ValueError("NLPProblem needs an objective or residuals")
        self.problem = problem
        self.n = problem.n
        self.evaluations = 0

    def _checked(self, name, values, jac, rows=None):
        values = np.atleast_1d(np.asarray(values, dtype=float))
        jac = np.asarray(jac, dtype=float)
        if rows is None:
            rows = values.shape[0]
        if jac.shape != (rows, self.n):
            raise EvaluationFailure(f"{name} Jacobian has shape {jac.shape}, expected ({rows}, {self.n})")
        if not (np.all(np.isfinite(values)) and np.all(np.isfinite(jac))):
            raise EvaluationFailure(f"{name} returned non-finite values")
        return values, jac

    def objective(self, z):
        self.evaluations += 1
        if self.problem.residuals is not None:
            r, jr = self.residuals(z)
            return 0.5 * float(r @ r), jr.T @ r
        f, grad = self.problem.objective(z)
        f = float(f)
        grad = np.asarray(grad, dtype=float).reshape(-1)
        if grad.shape != (self.n,):
            raise EvaluationFailure(f"objective gradient has shape {grad.shape}, expected ({self.n},)")
        if not (np.isfinite(f) and np.all(np.isfinite(grad))):
            raise EvaluationFailure("objective returned non-finite values")
        return f, grad

    def residuals(self, z):
        r, jr = self.problem.residuals(z)
        return self._checked("residual", r, jr)

    def equalities(self, z):
        if self.problem.equalities is None:
            return np.zeros(0), np.zeros((0, self.n))
        return self._checked("equality", *self.problem.equalities(z))

    def inequalities(self, z):
        if self.problem.inequalities is None:
            return np.zeros(0), np.zeros((0, self.n))
        return self._checked("inequality", *self.problem.inequalities(z))


def check_gradient(evaluator, z, rtol=1e-4, step=1e-6):
    """Compare the objective gradient with central differences; raise on mismatch."""
    _, grad = evaluator.objective(z)
    fd = np.zeros_like(grad)
    for i in range(z.size):
        h = step * max(1.0, abs(z[i]))
        e = np.zeros_like(z)
        e[i] = h
        fd[i] = (evaluator.objective(z + e)[0] - evaluator.objective(z - e)[0]) / (2 * h)
    error = np.max(np.abs(fd - grad))
    if error > rtol * max(1.0, np.max(np.abs(grad))):
        raise EvaluationFailure(
            f"objective gradient disagrees with finite differences (max error {error:.3e})")


def projected_gradient(z, grad, lower, upper):
    return z - np.clip(z - grad, lower, upper)


def least_squares_multipliers(grad, jc, jh, h, interior, active_tol):
    """
    Multipliers minimizing |grad + jc^T lam + jh^T nu| over the interior
    variables, with nu restricted to the nearly active inequalities.

    Returns None when an active inequality gets a negative multiplier.
    """
    if not np.any(interior):
        return None
    active = h >= -active_tol
    a = np.vstack([jc, jh[active]])[:, interior]
    if a.shape[0] == 0:
        return np.zeros(jc.shape[0]), np.zeros(jh.shape[0])
    mult, *_ = np.linalg.lstsq(a.T, -grad[interior], rcond=None)
    lam = mult[:jc.shape[0]]
    nu = np.zeros(jh.shape[0])
    nu[active] = mult[jc.shape[0]:]
    if np.any(nu < 0.0):
        return None
    return lam, nu


class _AugmentedLagrangian:

    def __init__(self, evaluator, lower, upper, free, z_fixed):
        self.ev = evaluator
        self.lower, self.upper = lower, upper
        self.free = free
        self.z_fixed = z_fixed

    def expand(self, zf):
        z = self.z_fixed.copy()
        z[self.free] = zf
        return z

    def value_and_gradient(self, z, lam, nu, mu):
        f, grad = self.ev.objective(z)
        c, jc = self.ev.equalities(z)
        h, jh = self.ev.inequalities(z)
        shifted = np.maximum(0.0, nu + mu * h)
        value = f + lam @ c + 0.5 * mu * (c @ c) + (shifted @ shifted - nu @ nu) / (2.0 * mu)
        grad = grad + jc.T @ (lam + mu * c) + jh.T @ shifted
        return value, grad

    def residual_vector(self, z, lam, nu, mu):
        r, jr = self.ev.residuals(z)
        c, jc = self.ev.equalities(z)
        h, jh = self.ev.inequalities(z)
        root = np.sqrt(mu)
        shifted = nu + mu * h
        active = (shifted > 0).astype(float)
        values = np.concatenate([r, root * c + lam / root, active * shifted / root])
        jac = np.vstack([jr, root * jc, root * jh * active[:, None]])
        return values, jac

    def minimize(self, z, lam, nu, mu, gtol, max_iter):
        free = self.free
        zf0 = z[free]
        lo, hi = self.lower[free], self.upper[free]

        if self.ev.problem.residuals is not None:
            cache = {}

            def evaluate(zf):
                key = zf.tobytes()
                if key not in cache:
                    cache.clear()
                    values, jac = self.residual_vector(self.expand(zf), lam, nu, mu)
                    cache[key] = (values, jac[:, free])
                return cache[key]

            result = scipy.optimize.least_squares(
                lambda zf: evaluate(zf)[0], zf0, jac=lambda zf: evaluate(zf)[1],
                bounds=(lo, hi), method="trf", x_scale="jac",
                ftol=1e-15, xtol=1e-15, gtol=1e-15, max_nfev=max_iter,
            )
        else:
            def fun(zf):
                value, grad = self.value_and_gradient(self.expand(zf), lam, nu, mu)
                return value, grad[free]

            result = scipy.optimize.minimize(
                fun, zf0, jac=True, method="L-BFGS-B",
                bounds=list(zip(lo, hi)),
                options={"maxiter": max_iter, "ftol": 1e-15, "gtol": gtol, "maxcor": 20},
            )
        return self.expand(result.x), result


def solve(problem, options=None, raise_on_max_iter=False, **overrides):
    """
    Solve ``problem`` to local optimality from ``problem.z0``.

    The returned status is ``optimal`` when stationarity (relative to the
    initial gradient scale), feasibility and complementarity are all within
    ``tol``; ``max_iter`` when the outer iteration budget ran out; ``failure``
    when an iterate left the region where the callables are finite, in which
    case the last finite iterate is returned.

    The penalty only grows while the constraint violation is above ``tol``
    and not shrinking fast enough, so it stays moderate once the iterates
    are feasible to round-off.
    """
    opts = replace(options or NLPOptions(), **overrides)
    ev = _Evaluator(problem)
    n = problem.n

    lower = np.full(n, -np.inf) if problem.lower is None else np.asarray(problem.lower, dtype=float)
    upper = np.full(n, np.inf) if problem.upper is None else np.asarray(problem.upper, dtype=float)
    if np.any(lower > upper):
        raise Infeasible("variable bounds are inconsistent (lower > upper)")

    z = np.clip(np.asarray(problem.z0, dtype=float), lower, upper)
    if z.shape != (n,) or not np.all(np.isfinite(z)):
        raise EvaluationFailure("initial point must be a finite vector of length n")
    if opts.check_gradients:
        check_gradient(ev, z, rtol=opts.gradient_rtol)

    free = lower < upper
    solver = _AugmentedLagrangian(ev, lower, upper, free, z.copy())

    _, grad0 = ev.objective(z)
    scale = max(1.0, float(np.max(np.abs(grad0))) if grad0.size else 1.0)
    lam = np.zeros(ev.equalities(z)[0].size)
    nu = np.zeros(ev.inequalities(z)[0].size)
    mu = opts.penalty0
    previous_violation = np.inf
    status, message = MAX_ITER, "outer iteration limit reached"
    kkt = violation = np.inf

    def kkt_terms(z, grad, jc, jh, h, lam, nu):
        lagrangian_grad = grad + jc.T @ lam + jh.T @ nu
        stationarity = np.max(np.abs(projected_gradient(z, lagrangian_grad, lower, upper))[free],
                              initial=0.0) / scale
        complementarity = np.max(np.abs(nu * h), initial=0.0) / scale
        return stationarity, complementarity

    report_lam, report_nu = lam, nu
    iteration = 0
    for iteration in range(1, opts.max_iter + 1):
        try:
            z_next, inner = solver.minimize(z, lam, nu, mu, 0.1 * opts.tol * scale, opts.inner_max_iter)
            if not np.all(np.isfinite(z_next)):
                raise EvaluationFailure("inner solver produced a non-finite iterate")
            c, jc = ev.equalities(z_next)
            h, jh = ev.inequalities(z_next)
            f, grad = ev.objective(z_next)
        except EvaluationFailure as err:
            status, message = FAILURE, str(err)
            logger.debug("nlp iter %d: %s; keeping the last finite iterate", iteration, err)
            break
        z = z_next

        lam = lam + mu * c
        nu = np.maximum(0.0, nu + mu * h)
        violation = max(np.max(np.abs(c), initial=0.0), np.max(h, initial=0.0))

        stationarity, complementarity = kkt_terms(z, grad, jc, jh, h, lam, nu)
        report_lam, report_nu = lam, nu
        # first-order updates carry inner-solve error; a least-squares estimate may certify the point
        interior = free & (z > lower) & (z < upper)
        estimate = least_squares_multipliers(grad, jc, jh, h, interior, opts.tol)
        if estimate is not None:
            stat_ls, compl_ls = kkt_terms(z, grad, jc, jh, h, *estimate)
            if max(stat_ls, compl_ls) < max(stationarity, complementarity):
                stationarity, complementarity = stat_ls, compl_ls
                report_lam, report_nu = estimate

        kkt = max(stationarity, violation, complementarity)
        logger.debug("nlp iter %d: f=%.10g stat=%.2e viol=%.2e compl=%.2e mu=%.1e inner=%s",
                     iteration, f, stationarity, violation, complementarity, mu, inner.message)

        if stationarity <= opts.tol and violation <= opts.tol and complementarity <= opts.tol:
            status, message = OPTIMAL, "KKT conditions satisfied"
            break
        if violation > opts.tol and violation > 0.25 * previous_violation:
            mu = min(mu * opts.penalty_growth, opts.penalty_max)
        previous_violation = violation

    f, _ = ev.objective(z)
    solution = NLPSolution(
        z=z,
        objective_value=f,
        kkt_residual=float(kkt),
        status=status,
        eq_multipliers=report_lam,
        ineq_multipliers=report_nu,
        constraint_violation=float(violation),
        iterations=iteration,
        message=message,
        penalty=float(mu),
    )
    if status == MAX_ITER:
        logger.debug("nlp stopped after %d outer iterations, kkt residual %.3e", iteration, kkt)
        if raise_on_max_iter:
            raise MaxIterations(f"no KKT point within {opts.max_iter} iterations (residual {kkt:.3e})")
    return solution
