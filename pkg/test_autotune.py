import itertools
from dataclasses import replace

import numpy as np
import pytest

from src.autotune import (
    InverseTradeoffFit,
    RhoController,
    TradeoffSample,
    fit_inverse_tradeoff,
    pareto_filter,
    pareto_sweep,
    read_sweep_csv,
    rho_update,
    write_sweep_csv,
)
from src.case_io import ExperimentConfig
from src.errors import DegenerateFit, HorizonExhausted, InsufficientSamples
from src.estimator import Belief, mle_update
from src.grid_core import grid_model
from src.pf_solver import solve_power_flow
from src.runner import first_step_belief


def sample(cost, trace, rho=1.0):
    return TradeoffSample(rho=rho, cost=cost, trace_v=trace)


def dominates(a, b):
    return a.cost <= b.cost and a.trace_v <= b.trace_v and (a.cost < b.cost or a.trace_v < b.trace_v)


def test_pareto_filter_examples():
    assert pareto_filter([sample(1, 5), sample(2, 6)]) == [sample(1, 5)]
    front = pareto_filter([sample(1, 5), sample(2, 3), sample(3, 4)])
    assert [(s.cost, s.trace_v) for s in front] == [(2, 3), (1, 5)]
    assert pareto_filter([]) == []


def test_pareto_filter_properties():
    rng = np.random.default_rng(0)
    samples = [sample(c, t) for c, t in rng.uniform(0.1, 10.0, size=(60, 2))]
    front = pareto_filter(samples)
    for a, b in itertools.permutations(front, 2):
        assert not dominates(a, b)
    for s in samples:
        if s not in front:
            assert any(dominates(f, s) for f in front)
    costs = [s.cost for s in front]
    assert all(x > y for x, y in zip(costs, costs[1:]))
    assert pareto_filter(front) == front


def synthetic_samples(amplitude, decay, informations):
    return [TradeoffSample(rho=float(amplitude * np.exp(-decay * i ** 2)), cost=1.0 / (k + 1), trace_v=1.0 / i)
            for k, i in enumerate(informations)]


def test_fit_recovers_reference_constants():
    samples = synthetic_samples(0.05891, 1411.0, np.linspace(0.005, 0.06, 12))
    fit = fit_inverse_tradeoff(samples)
    assert fit.amplitude == pytest.approx(0.05891, rel=1e-6)
    assert fit.decay == pytest.approx(1411.0, rel=1e-6)
    assert fit.residual < 1e-8
    assert fit.info_range == pytest.approx((0.005, 0.06))
    assert fit.rho_range[0] == pytest.approx(0.05891 * np.exp(-1411.0 * 0.06 ** 2))
    assert fit.rho_range[1] == pytest.approx(0.05891 * np.exp(-1411.0 * 0.005 ** 2))
    assert not fit.poor


def test_fit_recovers_random_constants():
    rng = np.random.default_rng(1)
    for _ in range(100):
        amplitude = 10 ** rng.uniform(-3, 0)
        decay = 10 ** rng.uniform(1, 4)
        top = np.sqrt(20.0 / decay)
        fit = fit_inverse_tradeoff(synthetic_samples(amplitude, decay, np.linspace(0.1 * top, top, 8)))
        assert fit.amplitude == pytest.approx(amplitude, rel=1e-6)
        assert fit.decay == pytest.approx(decay, rel=1e-6)


def test_fit_errors():
    with pytest.raises(InsufficientSamples):
        fit_inverse_tradeoff([sample(1, 2), sample(2, 1)])
    with pytest.raises(DegenerateFit):
        fit_inverse_tradeoff([sample(1, 2, rho=r) for r in (0.1, 1.0, 10.0)])
    # rho growing with information
    growing = [TradeoffSample(rho=r, cost=1.0, trace_v=t) for r, t in ((0.1, 3.0), (1.0, 2.0), (10.0, 1.0))]
    with pytest.raises(DegenerateFit):
        fit_inverse_tradeoff(growing)


def test_fit_derivative():
    fit = InverseTradeoffFit(amplitude=0.05891, decay=1411.0)
    i = 0.02
    numeric = (fit(i + 1e-7) - fit(i - 1e-7)) / 2e-7
    assert fit.derivative(i) == pytest.approx(numeric, rel=1e-6)


def controller(**kwargs):
    fit = InverseTradeoffFit(amplitude=1.0, decay=1.0)
    settings = dict(rho=1e-2, horizon=25, target_trace=1.0, initial_trace=1e20, k=1)
    settings.update(kwargs)
    return RhoController.initialize(fit, **settings)


def test_initial_information_rate():
    ctrl = controller()
    assert ctrl.i0 == pytest.approx((1.0 - 1e-20) / 25)


def test_on_track_keeps_rho():
    ctrl = controller(k=5)
    # trace for which I+ equals I0 at k = 5
    trace = 1.0 / (1.0 - ctrl.i0 * (ctrl.horizon - ctrl.k))
    updated = rho_update(ctrl, trace)
    assert updated.rho == pytest.approx(ctrl.rho)
    assert updated.k == 6


def test_target_reached_raises_rho():
    ctrl = controller(k=3)
    assert rho_update(ctrl, 0.5).rho > ctrl.rho


def test_deficit_lowers_rho():
    ctrl = controller(k=3)
    assert rho_update(ctrl, 50.0).rho < ctrl.rho


def test_clamping():
    ctrl = controller(rho=1e-8 * 1.5, k=3)
    ctrl = replace(ctrl, fit=InverseTradeoffFit(amplitude=1e6, decay=1e6))
    assert rho_update(ctrl, 50.0).rho == 1e-8
    rng = np.random.default_rng(2)
    for _ in range(100):
        trace = 10 ** rng.uniform(-5, 25)
        for mode in ("information", "literal"):
            rho = rho_update(controller(k=2, gain_mode=mode), trace).rho
            assert 1e-8 <= rho <= 1e8


def test_information_step_is_one_decade_at_most():
    ctrl = replace(controller(k=3), fit=InverseTradeoffFit(amplitude=1.0, decay=1e9))
    assert rho_update(ctrl, 50.0).rho == pytest.approx(ctrl.rho / 10)
    assert rho_update(ctrl, 0.5).rho == pytest.approx(ctrl.rho * 10)


def test_gain_is_taken_inside_fitted_range():
    fit = InverseTradeoffFit(amplitude=1.0, decay=10.0, info_range=(0.01, 0.02))
    ctrl = replace(controller(k=3), fit=fit)
    trace = 50.0
    i_plus = (1.0 - 1.0 / trace) / (ctrl.horizon - ctrl.k)
    expected = ctrl.rho * np.exp(-2 * 10.0 * 0.02 * (i_plus - ctrl.i0))
    assert rho_update(ctrl, trace).rho == pytest.approx(expected)


def test_rho_stays_in_fitted_rho_range():
    fit = InverseTradeoffFit(amplitude=1.0, decay=1e9, rho_range=(1e-4, 1e2))
    ctrl = RhoController.initialize(fit, rho=1e-6, horizon=25, target_trace=1.0, initial_trace=1e20, k=1)
    assert (ctrl.rho_min, ctrl.rho_max) == (1e-4, 1e2)
    assert ctrl.rho == 1e-4
    for trace in (1e6, 1e3, 10.0, 0.5, 0.1, 0.01):
        ctrl = rho_update(ctrl, trace)
        assert 1e-4 <= ctrl.rho <= 1e2
    narrower = ctrl.with_fit(replace(fit, rho_range=(1e-3, 1e-1)))
    assert 1e-3 <= narrower.rho <= 1e-1
    assert narrower.rho_bounds == (1e-8, 1e8)


def test_update_without_fit_steps_a_decade():
    ctrl = RhoController.initialize(None, rho=1e-2, horizon=25, target_trace=1.0, initial_trace=1e20, k=3)
    assert ctrl.needs_refit
    assert rho_update(ctrl, 50.0).rho == pytest.approx(1e-3)
    assert rho_update(ctrl, 0.5).rho == pytest.approx(1e-1)


def test_poor_fit_requests_refit():
    assert not controller().needs_refit
    poor = replace(controller(), fit=InverseTradeoffFit(amplitude=1.0, decay=1.0, residual=1.26))
    assert poor.needs_refit


def test_literal_mode_uses_raw_gain():
    ctrl = controller(k=3, gain_mode="literal")
    trace = 50.0
    i_plus = (1.0 - 1.0 / trace) / (ctrl.horizon - ctrl.k)
    expected = ctrl.rho + ctrl.fit.derivative(i_plus) * (i_plus - ctrl.i0)
    assert rho_update(ctrl, trace).rho == pytest.approx(np.clip(expected, 1e-8, 1e8))


def test_horizon_exhausted():
    with pytest.raises(HorizonExhausted):
        rho_update(controller(k=25), 2.0)


def test_sweep_csv_round_trip(tmp_path):
    samples = [sample(3.0, 1.0, rho=1e-4), sample(2.0, 2.0, rho=1e-2), sample(2.5, 3.0, rho=1.0)]
    path = tmp_path / "sweep.csv"
    write_sweep_csv(samples, path)
    assert read_sweep_csv(path) == samples
    flags = path.read_text().splitlines()
    assert flags[0] == "rho,cost,trace_v,filtered"
    assert flags[3].endswith("False")


def first_measurement_belief(case):
    model = grid_model(case)
    y = case.nominal_params()
    u = model.input_from_generation({2: (0.3, 0.1)})
    x = solve_power_flow(case, y, u).x
    _, belief = mle_update(case, Belief.from_variance(y, 1e20), u, model.measurement(x, y), 1e-4)
    return belief


def test_sweep_on_two_bus(case2):
    belief = first_measurement_belief(case2)
    samples = pareto_sweep(case2, belief, [1e-4, 1e-2, 1.0, 1.0], workers=2)
    assert len(samples) == 4
    assert [s.rho for s in samples] == [1e-4, 1e-2, 1.0, 1.0]
    assert samples[2] == samples[3]
    assert all(s.trace_v > 0 and s.cost > 0 for s in samples)


def test_sweep_grid_validation(case2):
    belief = first_measurement_belief(case2)
    with pytest.raises(ValueError):
        pareto_sweep(case2, belief, [1.0, 0.1])
    with pytest.raises(ValueError):
        pareto_sweep(case2, belief, [-1.0])


@pytest.mark.slow
def test_five_bus_front_and_controller(case5):
    config = ExperimentConfig()
    belief, x_s, u = first_step_belief(case5, config)
    grid = config.rho_grid_values()
    samples = pareto_sweep(case5, belief, grid, warm_start=(x_s, u), workers=4)
    assert len(samples) >= len(grid) - 2
    front = pareto_filter(samples)
    traces = [s.trace_v for s in front]
    costs = [s.cost for s in front]
    assert all(a < b for a, b in zip(traces, traces[1:]))
    assert all(a > b for a, b in zip(costs, costs[1:]))
    for s in samples:
        assert not any(dominates(s, f) for f in front)

    fit = fit_inverse_tradeoff(front)
    low, high = fit.rho_range
    ctrl = RhoController.initialize(fit, config.rho0, config.horizon, config.target_variance_trace,
                                    belief.trace_of_covariance(), k=1, rho_bounds=config.rho_bounds)
    trace = belief.trace_of_covariance()
    for k in range(1, config.horizon):
        trace = max(trace * 0.5, 0.2)
        ctrl = rho_update(ctrl, trace)
        assert config.rho_bounds[0] < ctrl.rho < config.rho_bounds[1]
        assert low <= ctrl.rho <= high


if __name__ == "__main__":
    pytest.main([__file__])
