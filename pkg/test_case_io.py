import os

import numpy as np
import pytest

from src.case_io import (
    ExperimentConfig,
    GridCase,
    parse_experiment_config,
    parse_matpower_case,
    parse_native_case,
    serialize_case,
    series_admittance,
    case_with_demand_scale,
)
from src.errors import (
    InconsistentTopology,
    MalformedBlock,
    MissingField,
    OutOfRange,
    UnsupportedFeature,
)
from src.grid_core import grid_model
from conftest import CASES

# line values of the 5-bus study case, (from, to, g, b)
TABLE_TRUTH = [
    (1, 2, 3.523, -35.235),
    (1, 4, 3.257, -32.569),
    (1, 5, 15.470, -154.703),
    (2, 3, 9.168, -91.676),
    (3, 4, 3.334, -33.337),
    (4, 5, 3.334, -33.337),
]


def read_case_text(name):
    with open(os.path.join(CASES, name), encoding="utf-8") as handle:
        return handle.read()


def test_series_admittance_pure_reactance():
    g, b = series_admittance(0.0, 0.1)
    assert g == 0.0
    assert b == pytest.approx(-10.0)


def test_series_admittance_zero_impedance():
    with pytest.raises(InconsistentTopology):
        series_admittance(0.0, 0.0)


def test_five_bus_case(case5):
    assert case5.n_buses == 5
    assert case5.n_lines == 6
    assert case5.slack_bus == 1
    assert case5.base_power == 100
    assert [gen.bus for gen in case5.generators] == [1, 3, 4, 5]
    for line, (k, l, g, b) in zip(case5.lines, TABLE_TRUTH):
        assert (line.from_bus, line.to_bus) == (k, l)
        assert line.g == pytest.approx(g, rel=1e-3)
        assert line.b == pytest.approx(b, rel=1e-3)


def test_five_bus_costs_and_units(case5):
    costs = [(gen.alpha, gen.beta) for gen in case5.generators]
    assert costs == [(0.1, 15), (0.11, 30), (0.12, 40), (0.13, 10)]
    assert case5.bus(2).p_d == pytest.approx(3.0)
    assert case5.generator_at(3).p_max == pytest.approx(5.2)
    assert case5.generator_at(2) is None


def test_native_round_trip(case5):
    again = parse_native_case(serialize_case(case5))
    assert again == case5
    np.testing.assert_array_equal(again.nominal_params(), case5.nominal_params())


def test_native_missing_field(case5):
    text = serialize_case(case5).replace('"slack_bus"', '"reference"')
    with pytest.raises(MalformedBlock):
        parse_native_case(text)


def test_native_wrong_tag():
    with pytest.raises(MalformedBlock):
        parse_native_case('{"format": "something-else"}')


def _drop_column(text, block, column):
    """Delete one column from every row of an mpc block."""
    head, rest = text.split(f"mpc.{block} = [", 1)
    body, tail = rest.split("];", 1)
    rows = []
    for row in body.strip().splitlines():
        tokens = row.replace(";", "").split()
        del tokens[column]
        rows.append("\t".join(tokens) + ";")
    return head + f"mpc.{block} = [\n" + "\n".join(rows) + "\n" + "];" + tail


@pytest.mark.parametrize("block", ["bus", "gen", "branch"])
def test_missing_column_rejected(block):
    text = _drop_column(read_case_text("case5_oed.m"), block, 2)
    with pytest.raises(MalformedBlock):
        parse_matpower_case(text)


def test_short_branch_row_rejected():
    text = read_case_text("case2.m").replace("1\t2\t0.01\t0.1\t0\t0", "1\t2\t0.01\t0.1\t0", 1)
    with pytest.raises(MalformedBlock):
        parse_matpower_case(text)


def test_phase_shift_unsupported():
    text = read_case_text("case2.m").replace("0\t0\t1\t-360\t360", "0\t5\t1\t-360\t360")
    with pytest.raises(UnsupportedFeature):
        parse_matpower_case(text)


def test_piecewise_cost_unsupported():
    text = read_case_text("case2.m").replace("2\t0\t0\t3\t0.1\t15\t0", "1\t0\t0\t2\t0\t0\t10", 1)
    with pytest.raises(UnsupportedFeature):
        parse_matpower_case(text)


def test_unknown_block_unsupported():
    text = read_case_text("case2.m") + "\nmpc.dcline = [1 2 1];\n"
    with pytest.raises(UnsupportedFeature):
        parse_matpower_case(text)


def test_generator_voltage_setpoint_overrides_bus_magnitude():
    text = read_case_text("case2.m").replace("1\t30\t0\t100\t-100\t1\t", "1\t30\t0\t100\t-100\t1.04\t", 1)
    case = parse_matpower_case(text)
    assert case.bus(1).v_set == pytest.approx(1.04)
    assert case.bus(2).v_set == pytest.approx(1.0)
    assert grid_model(case).flat_state()[0] == pytest.approx(1.04)


def test_missing_slack_generator(case2):
    with pytest.raises(InconsistentTopology):
        GridCase(base_power=100, buses=case2.buses, lines=case2.lines,
                 generators=case2.generators[1:], slack_bus=1)


def test_demand_scale(case5):
    scaled = case_with_demand_scale(case5, 1.1)
    assert scaled.bus(4).p_d == pytest.approx(1.1 * case5.bus(4).p_d)
    assert scaled.lines == case5.lines


def test_config_defaults():
    config = parse_experiment_config("")
    assert config == ExperimentConfig()
    assert config.horizon == 25
    assert config.prior_variance == 1e20
    assert len(config.rho_grid_values()) == 25
    assert config.rho_grid_values()[0] == pytest.approx(1e-4)
    assert config.rho_grid_values()[-1] == pytest.approx(1e2)


def test_config_study_defaults_file():
    with open(os.path.join(os.path.dirname(CASES), "configs", "study_defaults.json"), encoding="utf-8") as handle:
        config = parse_experiment_config(handle.read())
    assert config.rho0 == 1e-4
    assert config.target_variance_trace == 1.0
    assert config.strategy == "oed_opf_autotuned"


def test_config_param_sections():
    config = parse_experiment_config('{"true_params": {"g": [1, 2], "b": [-10, -20]}}')
    np.testing.assert_array_equal(config.true_param_array(), [1, 2, -10, -20])
    with pytest.raises(MissingField):
        parse_experiment_config('{"true_params": {"g": [1, 2]}}')
    with pytest.raises(MissingField):
        parse_experiment_config('{"rho_grid": {"min": 1e-3, "max": 1}}')


@pytest.mark.parametrize("text", [
    '{"horizon": 0}',
    '{"noise_variance": -1}',
    '{"strategy": "random"}',
    '{"estimation": "online"}',
    '{"true_params": [0.0, -1.0]}',
])
def test_config_out_of_range(text):
    with pytest.raises(OutOfRange):
        parse_experiment_config(text)


if __name__ == "__main__":
    pytest.main([__file__])
