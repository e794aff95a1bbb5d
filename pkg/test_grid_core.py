import numpy as np
import pytest

from src.errors import DimensionMismatch, UnknownLine
from src.grid_core import grid_model


def random_point(model, rng):
    x = model.flat_state()
    x[0::2] = rng.uniform(0.9, 1.1, model.n_state // 2)
    x[1::2] = rng.uniform(-0.3, 0.3, model.n_state // 2)
    y = np.concatenate([rng.uniform(1, 20, model.n_lines), rng.uniform(-150, -10, model.n_lines)])
    return x, y


def central_difference(fun, z, step=1e-6):
    cols = []
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = step * max(1.0, abs(z[i]))
        cols.append((fun(z + e) - fun(z - e)) / (2 * e[i]))
    return np.column_stack(cols)


def assert_close(analytic, numeric, rtol):
    scale = max(1.0, np.max(np.abs(numeric)))
    assert np.max(np.abs(analytic - numeric)) <= rtol * scale


def test_layout(case5):
    model = grid_model(case5)
    assert model.n_state == 8
    assert model.n_params == 12
    assert model.n_measurements == 20
    assert model.control_buses == (3, 4, 5)
    np.testing.assert_array_equal(model.control_cols, [2, 3, 4, 5, 6, 7])


def test_line_flow_formula(case2):
    model = grid_model(case2)
    g, b = 2.0, -20.0
    vk, vl, th = 1.0, 0.95, -0.1
    x = np.array([vl, th])
    c, s = np.cos(-th), np.sin(-th)
    p, q = model.line_flow(x, [g, b], (1, 2))
    assert p == pytest.approx(g * (vk ** 2 - vk * vl * c) - b * vk * vl * s)
    assert q == pytest.approx(-b * (vk ** 2 - vk * vl * c) - g * vk * vl * s)
    # opposite orientation uses the same line data
    p_back, _ = model.line_flow(x, [g, b], (2, 1))
    assert p + p_back == pytest.approx(model.losses(x, [g, b]))


def test_unknown_line(case5):
    model = grid_model(case5)
    with pytest.raises(UnknownLine):
        model.line_flow(model.flat_state(), case5.nominal_params(), (2, 5))


def test_flat_profile_carries_no_flow(case5):
    model = grid_model(case5)
    m = model.measurement(model.flat_state(), case5.nominal_params())
    np.testing.assert_allclose(m[model.n_state:], 0.0, atol=1e-12)


def test_measurement_interleaves_line_flows(case5):
    model = grid_model(case5)
    x, y = random_point(model, np.random.default_rng(9))
    m = model.measurement(x, y)
    assert m.shape == (model.n_state + 2 * case5.n_lines,)
    np.testing.assert_array_equal(m[:model.n_state], x)
    for j, line in enumerate(case5.lines):
        p, q = model.line_flow(x, y, (line.from_bus, line.to_bus))
        assert m[model.n_state + 2 * j] == pytest.approx(p, rel=1e-12, abs=1e-9)
        assert m[model.n_state + 2 * j + 1] == pytest.approx(q, rel=1e-12, abs=1e-9)


@pytest.mark.parametrize("seed", range(100))
def test_jacobians_match_finite_differences(case5, seed):
    model = grid_model(case5)
    x, y = random_point(model, np.random.default_rng(seed))
    jac = model.jacobians(x, y)
    assert_close(jac.dS_dx, central_difference(lambda z: model.residual_injection(z, y), x), 1e-5)
    assert_close(jac.dS_dy, central_difference(lambda z: model.residual_injection(x, z), y), 1e-5)
    assert_close(jac.dM_dx, central_difference(lambda z: model.measurement(z, y), x), 1e-5)
    assert_close(jac.dM_dy, central_difference(lambda z: model.measurement(x, z), y), 1e-5)


def test_slack_jacobian(case5):
    model = grid_model(case5)
    x, y = random_point(model, np.random.default_rng(42))
    d_x, d_y = model.slack_jacobian(x, y)
    numeric = central_difference(lambda z: np.array(model.slack_injection(z, y)), x)
    assert_close(d_x, numeric, 1e-5)
    assert d_y.shape == (2, model.n_params)


def test_losses_non_negative(case5):
    model = grid_model(case5)
    rng = np.random.default_rng(7)
    for _ in range(20):
        x, y = random_point(model, rng)
        assert model.losses(x, y) >= -1e-12


def test_dimension_checks(case5):
    model = grid_model(case5)
    with pytest.raises(DimensionMismatch):
        model.measurement(np.ones(3), case5.nominal_params())
    with pytest.raises(DimensionMismatch):
        model.residual_injection(model.flat_state(), np.ones(5))
    u = np.zeros(model.n_state)
    u[0] = 1.0  # bus 2 has no generator
    with pytest.raises(DimensionMismatch):
        model.check_input(u)


def test_generation_mapping(case5):
    model = grid_model(case5)
    generation = {3: (1.0, 0.1), 4: (0.5, -0.2), 5: (2.0, 0.3)}
    u = model.input_from_generation(generation)
    assert model.generation_from_input(u) == generation
    np.testing.assert_array_equal(model.input_from_controls(model.controls(u)), u)


def test_state_bounds_relaxation(case5):
    model = grid_model(case5)
    lo, hi = model.state_bounds()
    assert lo[0] == pytest.approx(0.9) and hi[0] == pytest.approx(1.1)
    lo_r, hi_r = model.state_bounds(relax=0.5)
    assert lo_r[0] == pytest.approx(0.45) and hi_r[0] == pytest.approx(1.65)


if __name__ == "__main__":
    pytest.main([__file__])
