import itertools

import numpy as np
import pytest

from src import nlp_core
from src.errors import EvaluationFailure, Infeasible, MaxIterations
from src.nlp_core import NLPProblem, solve


def quadratic(h, c):
    return lambda z: (0.5 * z @ h @ z + c @ z, h @ z + c)


def linear(a, b):
    return lambda z: (a @ z - b, a)


def test_active_inequality():
    problem = NLPProblem(
        n=1, z0=np.array([0.5]),
        objective=lambda z: ((z[0] - 1) ** 2, np.array([2 * (z[0] - 1)])),
        inequalities=lambda z: (z, np.eye(1)),
    )
    solution = solve(problem)
    assert solution.status == nlp_core.OPTIMAL
    assert solution.z[0] == pytest.approx(0.0, abs=1e-6)
    assert solution.ineq_multipliers[0] == pytest.approx(2.0, abs=1e-5)
    assert solution.kkt_residual <= 1e-6


def test_symmetric_projection():
    problem = NLPProblem(
        n=2, z0=np.array([3.0, -1.0]),
        objective=lambda z: (z @ z, 2 * z),
        equalities=linear(np.ones((1, 2)), np.array([1.0])),
    )
    solution = solve(problem)
    assert solution.success
    np.testing.assert_allclose(solution.z, [0.5, 0.5], atol=1e-6)


def test_residual_form_with_bounds():
    # min 1/2 |z - (2, -3)|^2 with z in [0, 1]^2
    target = np.array([2.0, -3.0])
    problem = NLPProblem(
        n=2, z0=np.array([0.5, 0.5]),
        residuals=lambda z: (z - target, np.eye(2)),
        lower=np.zeros(2), upper=np.ones(2),
    )
    solution = solve(problem)
    assert solution.success
    np.testing.assert_allclose(solution.z, [1.0, 0.0], atol=1e-6)


def test_fixed_variable_is_kept():
    problem = NLPProblem(
        n=2, z0=np.array([0.3, 0.0]),
        objective=lambda z: (z @ z, 2 * z),
        lower=np.array([0.3, -1.0]), upper=np.array([0.3, 1.0]),
    )
    solution = solve(problem)
    assert solution.z[0] == 0.3
    assert solution.z[1] == pytest.approx(0.0, abs=1e-8)


def random_spd(rng, n):
    a = rng.normal(size=(n, n))
    return a @ a.T + n * np.eye(n)


@pytest.mark.parametrize("seed", range(10))
def test_equality_qp_matches_kkt_solve(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 21))
    m = int(rng.integers(1, n))
    h, c = random_spd(rng, n), rng.normal(size=n)
    a, b = rng.normal(size=(m, n)), rng.normal(size=m)

    kkt = np.block([[h, a.T], [a, np.zeros((m, m))]])
    full = np.linalg.solve(kkt, np.concatenate([-c, b]))
    expected, multipliers = full[:n], full[n:]

    problem = NLPProblem(n=n, z0=np.zeros(n), objective=quadratic(h, c), equalities=linear(a, b))
    solution = solve(problem, tol=1e-7)
    assert solution.status == nlp_core.OPTIMAL
    np.testing.assert_allclose(solution.z, expected, atol=1e-6)
    np.testing.assert_allclose(solution.eq_multipliers, multipliers, rtol=1e-3, atol=1e-3)


@pytest.mark.parametrize("seed", range(5))
def test_penalty_stays_moderate_once_feasible(seed):
    # linear constraints are met to round-off after a couple of outer steps
    rng = np.random.default_rng(seed)
    n, m = 8, 3
    h, c = random_spd(rng, n), rng.normal(size=n)
    a, b = rng.normal(size=(m, n)), rng.normal(size=m)
    problem = NLPProblem(n=n, z0=np.zeros(n), objective=quadratic(h, c), equalities=linear(a, b))
    solution = solve(problem, tol=1e-7)
    assert solution.status == nlp_core.OPTIMAL
    assert solution.penalty < 1e8
    assert solution.constraint_violation <= 1e-7


def active_set_qp(h, c, g, e):
    """Brute-force min 1/2 z'Hz + c'z s.t. Gz <= e by enumerating active sets."""
    n, m = h.shape[0], g.shape[0]
    best, best_value = None, np.inf
    for size in range(m + 1):
        for active in itertools.combinations(range(m), size):
            ga = g[list(active)]
            kkt = np.block([[h, ga.T], [ga, np.zeros((size, size))]])
            try:
                sol = np.linalg.solve(kkt, np.concatenate([-c, e[list(active)]]))
            except np.linalg.LinAlgError:
                continue
            z, mult = sol[:n], sol[n:]
            if np.all(g @ z <= e + 1e-9) and np.all(mult >= -1e-9):
                value = 0.5 * z @ h @ z + c @ z
                if value < best_value:
                    best, best_value = z, value
    return best, best_value


@pytest.mark.parametrize("seed", range(5))
def test_inequality_qp_matches_active_set(seed):
    rng = np.random.default_rng(100 + seed)
    n, m = 4, 3
    h, c = random_spd(rng, n), rng.normal(size=n) * 5
    g, e = rng.normal(size=(m, n)), rng.uniform(0.1, 1.0, m)
    expected, value = active_set_qp(h, c, g, e)

    problem = NLPProblem(n=n, z0=np.zeros(n), objective=quadratic(h, c), inequalities=linear(g, e))
    solution = solve(problem, tol=1e-7)
    assert solution.success
    np.testing.assert_allclose(solution.z, expected, atol=1e-6)
    assert solution.objective_value == pytest.approx(value, rel=1e-6, abs=1e-6)


def test_row_permutation_invariance():
    rng = np.random.default_rng(3)
    n, m = 6, 3
    h, c = random_spd(rng, n), rng.normal(size=n)
    a, b = rng.normal(size=(m, n)), rng.normal(size=m)
    perm = [2, 0, 1]
    first = solve(NLPProblem(n=n, z0=np.zeros(n), objective=quadratic(h, c), equalities=linear(a, b)))
    second = solve(NLPProblem(n=n, z0=np.zeros(n), objective=quadratic(h, c),
                              equalities=linear(a[perm], b[perm])))
    np.testing.assert_allclose(first.z, second.z, atol=1e-6)


def test_non_finite_objective():
    problem = NLPProblem(n=1, z0=np.array([1.0]), objective=lambda z: (np.nan, np.zeros(1)))
    with pytest.raises(EvaluationFailure):
        solve(problem)


def test_non_finite_region_returns_failure():
    # the objective is undefined beyond z = 2 while its minimizer sits at z = 3
    def objective(z):
        if z[0] > 2.0:
            return np.nan, np.zeros(1)
        return (z[0] - 3.0) ** 2, np.array([2 * (z[0] - 3.0)])

    solution = solve(NLPProblem(n=1, z0=np.zeros(1), objective=objective))
    assert solution.status == nlp_core.FAILURE
    assert not solution.success
    assert np.all(np.isfinite(solution.z))
    assert solution.z[0] <= 2.0


def test_gradient_check_catches_wrong_gradient():
    problem = NLPProblem(n=2, z0=np.array([1.0, 2.0]), objective=lambda z: (z @ z, z))
    with pytest.raises(EvaluationFailure):
        solve(problem, check_gradients=True)


def test_inconsistent_bounds():
    problem = NLPProblem(n=1, z0=np.zeros(1), objective=lambda z: (z @ z, 2 * z),
                         lower=np.ones(1), upper=np.zeros(1))
    with pytest.raises(Infeasible):
        solve(problem)


def test_max_iterations():
    # infeasible pair of equalities: z = 0 and z = 1
    problem = NLPProblem(
        n=1, z0=np.zeros(1), objective=lambda z: (z @ z, 2 * z),
        equalities=lambda z: (np.array([z[0], z[0] - 1.0]), np.ones((2, 1))),
    )
    solution = solve(problem, max_iter=5)
    assert solution.status == nlp_core.MAX_ITER
    with pytest.raises(MaxIterations):
        solve(problem, max_iter=5, raise_on_max_iter=True)


if __name__ == "__main__":
    pytest.main([__file__])
