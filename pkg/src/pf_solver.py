"""
Newton power flow: solve S(x, y) = u - d for the state x.

Every non-slack bus is a PQ bus here (generator reactive output is an input),
so the unknowns are exactly the state vector of grid_core.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from src.errors import NonConvergence, SingularJacobian
from src.grid_core import grid_model

logger = logging.getLogger(__name__)

PF_TOLERANCE = 1e-8
PF_MAX_ITER = 50
MAX_HALVINGS = 10
LOW_VOLTAGE = 0.7
SINGULAR_RCOND = 1e-14


@dataclass(frozen=True)
class PFSolution:
    x: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    low_voltage: bool = False


def _newton_step(jac, residual):
    try:
        lu, piv = scipy.linalg.lu_factor(jac, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as err:
        raise SingularJacobian(f"power-flow Jacobian could not be factored: {err}") from err
    diag = np.abs(np.diag(lu))
    if diag.min() <= SINGULAR_RCOND * max(diag.max(), 1.0):
        raise SingularJacobian("power-flow Jacobian is singular")
    return scipy.linalg.lu_solve((lu, piv), -residual)


def solve_power_flow(case, y, u, warm_start=None, tol=PF_TOLERANCE, max_iter=PF_MAX_ITER):
    """
    Solve the power-flow equations for x given line parameters y and input u.

    Starts from ``warm_start`` or the flat profile. A Newton step whose
    residual does not decrease is halved up to MAX_HALVINGS times.
    Raises SingularJacobian or NonConvergence; a converged low-voltage
    solution is returned with ``low_voltage`` set.
    """
    model = grid_model(case)
    y = model.check_params(y)
    u = np.asarray(u, dtype=float)
    target = u - model.demand_vector()

    x = model.flat_state() if warm_start is None else np.array(warm_start, dtype=float)
    residual = model.residual_injection(x, y) - target
    norm = np.max(np.abs(residual))

    iterations = 0
    while norm > tol:
        if iterations >= max_iter:
            raise NonConvergence(
                f"power flow did not converge in {max_iter} iterations (residual {norm:.3e})")
        if not np.isfinite(norm):
            raise NonConvergence("power-flow residual became non-finite")
        jac = model.jacobians(x, y).dS_dx
        step = _newton_step(jac, residual)

        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            trial = x + scale * step
            if np.all(trial[0::2] > 0):
                trial_residual = model.residual_injection(trial, y) - target
                trial_norm = np.max(np.abs(trial_residual))
                if trial_norm < norm:
                    break
            scale *= 0.5
        else:
            # no halving helped; take the shortest step and let the next iteration decide
            logger.debug("power flow: step halving exhausted at residual %.3e", norm)
            trial = x + scale * step
            trial_residual = model.residual_injection(trial, y) - target
            trial_norm = np.max(np.abs(trial_residual))
        x, residual, norm = trial, trial_residual, trial_norm
        iterations += 1

    low = bool(np.any(x[0::2] < LOW_VOLTAGE))
    if low:
        logger.warning("power flow converged to a low-voltage solution (min v = %.4f)", x[0::2].min())
    return PFSolution(x=x, residual_norm=float(norm), iterations=iterations, converged=True, low_voltage=low)
