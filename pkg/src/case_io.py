"""
Reading and writing grid cases and experiment configuration.

Two case formats are understood:

* a MATPOWER subset (``mpc.baseMVA``, ``mpc.bus``, ``mpc.gen``, ``mpc.branch``,
  ``mpc.gencost``), the format the 5-bus study case is distributed in;
* a native JSON document tagged ``"format": "oedopf-case"``, which is the
  canonical round-trip format produced by :func:`serialize_case`.

All quantities inside a :class:`GridCase` are per-unit on ``base_power`` except
the generator cost coefficients, which stay in the MATPOWER convention
($/MW^2 h and $/MW h) and are evaluated on ``p * base_power``.
"""

import json
import logging
import math
import re
from dataclasses import MISSING, asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from src.errors import (
    ConfigError,
    InconsistentTopology,
    MalformedBlock,
    MissingField,
    OutOfRange,
    UnsupportedFeature,
)

logger = logging.getLogger(__name__)

CASE_FORMAT = "oedopf-case"
CASE_FORMAT_VERSION = 1
CONFIG_FORMAT = "oedopf-config"

STRATEGIES = ("opf_mle", "pure_oed", "oed_opf_autotuned")
GAIN_MODES = ("information", "literal")
ESTIMATION_MODES = ("batch", "sequential")

# MATPOWER column positions (0-based) and minimum widths accepted
BUS_I, BUS_TYPE, PD, QD, GS, BS, VM, VMAX, VMIN = 0, 1, 2, 3, 4, 5, 7, 11, 12
GEN_BUS, QMAX, QMIN, VG, GEN_STATUS, PMAX, PMIN = 0, 3, 4, 5, 7, 8, 9
F_BUS, T_BUS, BR_R, BR_X, BR_B, TAP, SHIFT, BR_STATUS = 0, 1, 2, 3, 4, 8, 9, 10
MIN_COLUMNS = {"bus": 13, "gen": 10, "branch": 13, "gencost": 5}

REF_BUS_TYPE = 3
ISOLATED_BUS_TYPE = 4
POLYNOMIAL_COST = 2

SUPPORTED_BLOCKS = ("baseMVA", "version", "bus", "gen", "branch", "gencost")

_STATEMENT = re.compile(r"mpc\.(\w+)\s*=\s*(\[.*?\]|[^;\n]*)\s*;?", re.S)
_FUNCTION = re.compile(r"^\s*function\s+\w+\s*=\s*(\w+)", re.M)


@dataclass(frozen=True)
class BusSpec:
    index: int
    p_d: float
    q_d: float
    v_min: float
    v_max: float
    v_set: float = 1.0


@dataclass(frozen=True)
class LineSpec:
    """A transmission line (k, l) with its series conductance and susceptance."""
    from_bus: int
    to_bus: int
    g: float
    b: float


@dataclass(frozen=True)
class GenSpec:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    alpha: float
    beta: float


@dataclass(frozen=True)
class GridCase:
    """
    Static problem instance: topology, generators, limits, demands, costs.

    The slack bus carries the fixed voltage magnitude ``v_set`` of its BusSpec
    and angle zero.
    """
    base_power: float
    buses: Tuple[BusSpec, ...]
    lines: Tuple[LineSpec, ...]
    generators: Tuple[GenSpec, ...]
    slack_bus: int
    name: str = "case"

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "generators", tuple(self.generators))
        validate_case(self)

    @property
    def n_buses(self):
        return len(self.buses)

    @property
    def n_lines(self):
        return len(self.lines)

    def bus(self, index):
        return self.buses[index - 1]

    def generator_at(self, bus):
        for gen in self.generators:
            if gen.bus == bus:
                return gen
        return None

    def nominal_params(self):
        """Line parameters from the case data, ordered all g then all b."""
        g = [line.g for line in self.lines]
        b = [line.b for line in self.lines]
        return np.array(g + b, dtype=float)


def validate_case(case):
    """Check the GridCase invariants, raising InconsistentTopology on violation."""
    if not (case.base_power > 0 and math.isfinite(case.base_power)):
        raise InconsistentTopology(f"base power must be positive, got {case.base_power}")
    if not case.buses:
        raise InconsistentTopology("case has no buses")

    indices = [bus.index for bus in case.buses]
    if indices != list(range(1, len(indices) + 1)):
        raise InconsistentTopology(
            f"bus indices must be unique, contiguous from 1 and sorted, got {indices}")
    n = len(indices)

    for bus in case.buses:
        if bus.v_min > bus.v_max:
            raise InconsistentTopology(f"bus {bus.index}: v_min {bus.v_min} > v_max {bus.v_max}")
        if bus.v_min <= 0 or bus.v_set <= 0:
            raise InconsistentTopology(f"bus {bus.index}: voltages must be positive")

    seen = set()
    for line in case.lines:
        k, l = line.from_bus, line.to_bus
        if not (1 <= k <= n and 1 <= l <= n):
            raise InconsistentTopology(f"line ({k},{l}) refers to a missing bus")
        if k == l:
            raise InconsistentTopology(f"line ({k},{l}) is a self-loop")
        pair = frozenset((k, l))
        if pair in seen:
            raise InconsistentTopology(f"more than one line between buses {k} and {l}")
        seen.add(pair)
        if not (math.isfinite(line.g) and math.isfinite(line.b)):
            raise InconsistentTopology(f"line ({k},{l}) has non-finite parameters")
        if line.b > 0:
            logger.warning("line (%d,%d) has positive susceptance %.6g", k, l, line.b)

    if not 1 <= case.slack_bus <= n:
        raise InconsistentTopology(f"slack bus {case.slack_bus} does not exist")

    gen_buses = set()
    for gen in case.generators:
        if not 1 <= gen.bus <= n:
            raise InconsistentTopology(f"generator at missing bus {gen.bus}")
        if gen.bus in gen_buses:
            raise UnsupportedFeature(f"more than one generator at bus {gen.bus}")
        gen_buses.add(gen.bus)
        if gen.p_min > gen.p_max or gen.q_min > gen.q_max:
            raise InconsistentTopology(f"generator at bus {gen.bus} has lower bound above upper bound")
    if case.slack_bus not in gen_buses:
        raise InconsistentTopology(f"slack bus {case.slack_bus} hosts no generator")


def series_admittance(r, x):
    """Convert series impedance r + jx into conductance g and susceptance b."""
    z2 = r * r + x * x
    if z2 == 0.0:
        raise InconsistentTopology("branch with zero impedance")
    return r / z2, -x / z2


def _strip_comments(text):
    return "\n".join(line.split("%", 1)[0] for line in text.splitlines())


def _parse_matrix(name, body):
    inner = body.strip()[1:-1]
    rows = []
    for chunk in re.split(r"[;\n]", inner):
        tokens = chunk.replace(",", " ").split()
        if not tokens:
            continue
        try:
            rows.append([float(tok) for tok in tokens])
        except ValueError as err:
            raise MalformedBlock(f"mpc.{name} row {len(rows) + 1}: {err}") from err
    if not rows:
        raise MalformedBlock(f"mpc.{name} is empty")
    width = len(rows[0])
    for i, row in enumerate(rows):
        if len(row) != width:
            raise MalformedBlock(
                f"mpc.{name} row {i + 1} has {len(row)} columns, expected {width}")
    if name in MIN_COLUMNS and width < MIN_COLUMNS[name]:
        raise MalformedBlock(
            f"mpc.{name} has {width} columns, at least {MIN_COLUMNS[name]} required")
    return np.array(rows, dtype=float)


def _read_blocks(text):
    clean = _strip_comments(text)
    match = _FUNCTION.search(clean)
    name = match.group(1) if match else "case"

    blocks = {}
    for m in _STATEMENT.finditer(clean):
        key, body = m.group(1), m.group(2).strip()
        if key not in SUPPORTED_BLOCKS:
            raise UnsupportedFeature(f"mpc.{key} is not supported")
        if key in blocks:
            raise MalformedBlock(f"mpc.{key} defined twice")
        blocks[key] = body
    for key in ("baseMVA", "bus", "gen", "branch", "gencost"):
        if key not in blocks:
            raise MalformedBlock(f"mpc.{key} block missing")
    return name, blocks


def _cost_coefficients(row, gen_index):
    if int(row[0]) != POLYNOMIAL_COST:
        raise UnsupportedFeature(
            f"gencost row {gen_index + 1}: only polynomial cost (model 2) is supported")
    ncost = int(row[3])
    if len(row) != 4 + ncost:
        raise MalformedBlock(
            f"gencost row {gen_index + 1}: NCOST={ncost} but {len(row) - 4} coefficients given")
    coeffs = list(row[4:])
    if ncost > 3:
        raise UnsupportedFeature(f"gencost row {gen_index + 1}: polynomial degree above 2")
    # highest order first; the constant term does not influence dispatch
    padded = [0.0] * (3 - ncost) + coeffs
    return padded[0], padded[1]


def parse_matpower_case(text):
    """
    Parse a MATPOWER case function into a validated GridCase.

    Branch r, x become g = r/(r^2+x^2), b = -x/(r^2+x^2). A generator bus takes
    its voltage setpoint from the first in-service generator VG. Line charging and
    bus shunts are ignored. Taps other than 0/1, phase shifts, isolated buses,
    piecewise-linear costs and extra mpc fields raise UnsupportedFeature.
    """
    name, blocks = _read_blocks(text)

    try:
        base_power = float(blocks["baseMVA"])
    except ValueError as err:
        raise MalformedBlock(f"mpc.baseMVA: {err}") from err

    bus = _parse_matrix("bus", blocks["bus"])
    gen = _parse_matrix("gen", blocks["gen"])
    branch = _parse_matrix("branch", blocks["branch"])
    gencost = _parse_matrix("gencost", blocks["gencost"])

    # generator buses hold the generator's voltage setpoint, not the bus VM column
    voltage_setpoints = {}
    for row in gen:
        if row[GEN_STATUS] > 0:
            voltage_setpoints.setdefault(int(row[GEN_BUS]), row[VG])

    buses = []
    slack = []
    for row in bus:
        index = int(row[BUS_I])
        bus_type = int(row[BUS_TYPE])
        if bus_type == ISOLATED_BUS_TYPE:
            raise UnsupportedFeature(f"bus {index} is isolated")
        if bus_type == REF_BUS_TYPE:
            slack.append(index)
        if row[GS] != 0.0 or row[BS] != 0.0:
            logger.debug("bus %d: shunt admittance ignored", index)
        buses.append(BusSpec(
            index=index,
            p_d=row[PD] / base_power,
            q_d=row[QD] / base_power,
            v_min=row[VMIN],
            v_max=row[VMAX],
            v_set=voltage_setpoints.get(index, row[VM]),
        ))
    if len(slack) != 1:
        raise InconsistentTopology(f"exactly one reference bus required, found {len(slack)}")

    if len(gencost) != len(gen):
        if len(gencost) == 2 * len(gen):
            raise UnsupportedFeature("reactive power costs are not supported")
        raise InconsistentTopology(
            f"{len(gencost)} gencost rows for {len(gen)} generators")

    generators = []
    for i, row in enumerate(gen):
        if row[GEN_STATUS] <= 0:
            logger.info("generator %d at bus %d is out of service, skipped", i + 1, int(row[GEN_BUS]))
            continue
        alpha, beta = _cost_coefficients(gencost[i], i)
        generators.append(GenSpec(
            bus=int(row[GEN_BUS]),
            p_min=row[PMIN] / base_power,
            p_max=row[PMAX] / base_power,
            q_min=row[QMIN] / base_power,
            q_max=row[QMAX] / base_power,
            alpha=alpha,
            beta=beta,
        ))

    lines = []
    for row in branch:
        k, l = int(row[F_BUS]), int(row[T_BUS])
        if row[BR_STATUS] <= 0:
            logger.info("branch (%d,%d) is out of service, skipped", k, l)
            continue
        if row[TAP] not in (0.0, 1.0):
            raise UnsupportedFeature(f"branch ({k},{l}) has off-nominal tap {row[TAP]}")
        if row[SHIFT] != 0.0:
            raise UnsupportedFeature(f"branch ({k},{l}) has phase shift {row[SHIFT]}")
        g, b = series_admittance(row[BR_R], row[BR_X])
        lines.append(LineSpec(from_bus=k, to_bus=l, g=g, b=b))

    case = GridCase(
        base_power=base_power,
        buses=tuple(buses),
        lines=tuple(lines),
        generators=tuple(generators),
        slack_bus=slack[0],
        name=name,
    )
    logger.debug("parsed MATPOWER case %s: %d buses, %d lines, %d generators",
                 name, case.n_buses, case.n_lines, len(case.generators))
    return case


def serialize_case(case):
    """Write a GridCase as native JSON text."""
    document = {
        "format": CASE_FORMAT,
        "version": CASE_FORMAT_VERSION,
        "name": case.name,
        "base_power": case.base_power,
        "slack_bus": case.slack_bus,
        "buses": [asdict(bus) for bus in case.buses],
        "lines": [asdict(line) for line in case.lines],
        "generators": [asdict(gen) for gen in case.generators],
    }
    return json.dumps(document, indent=2)


def _records(document, key, spec_type):
    names = [f.name for f in fields(spec_type)]
    required = [f.name for f in fields(spec_type) if f.default is MISSING]
    items = []
    for i, entry in enumerate(document.get(key, [])):
        if not isinstance(entry, dict):
            raise MalformedBlock(f"{key}[{i}] is not an object")
        missing = [n for n in required if n not in entry]
        if missing:
            raise MalformedBlock(f"{key}[{i}] missing {', '.join(missing)}")
        items.append(spec_type(**{n: entry[n] for n in names if n in entry}))
    return tuple(items)


def parse_native_case(text):
    """Parse the native JSON case format."""
    try:
        document = json.loads(text)
    except json.JSONDecodeError as err:
        raise MalformedBlock(f"case document is not valid JSON: {err}") from err
    if not isinstance(document, dict) or document.get("format") != CASE_FORMAT:
        raise MalformedBlock(f"case document lacks the '{CASE_FORMAT}' format tag")
    if document.get("version", CASE_FORMAT_VERSION) > CASE_FORMAT_VERSION:
        raise UnsupportedFeature(f"case format version {document['version']} is newer than supported")
    for key in ("base_power", "slack_bus", "buses", "lines", "generators"):
        if key not in document:
            raise MalformedBlock(f"case document missing '{key}'")
    return GridCase(
        base_power=float(document["base_power"]),
        buses=_records(document, "buses", BusSpec),
        lines=_records(document, "lines", LineSpec),
        generators=_records(document, "generators", GenSpec),
        slack_bus=int(document["slack_bus"]),
        name=document.get("name", "case"),
    )


def load_case(path):
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".m":
        return parse_matpower_case(text)
    if path.suffix == ".json":
        return parse_native_case(text)
    raise UnsupportedFeature(f"unknown case file type '{path.suffix}'")


def case_with_demand_scale(case, factor):
    """Copy of ``case`` with every demand multiplied by ``factor``."""
    buses = tuple(replace(bus, p_d=bus.p_d * factor, q_d=bus.q_d * factor) for bus in case.buses)
    return replace(case, buses=buses)


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Settings of one estimation experiment.

    Defaults reproduce the 5-bus study: noise variance 1e-4, prior variance
    1e20, rho0 1e-4, 25 iterations and a target Tr(V) of 1 S^2.
    """
    horizon: int = 25
    target_variance_trace: float = 1.0
    rho0: float = 1e-4
    termination_eps: float = 1e-6
    noise_variance: float = 1e-4
    prior_variance: float = 1e20
    input_change_weight: float = 0.1
    rng_seed: int = 0
    strategy: str = "oed_opf_autotuned"
    true_params: Optional[Tuple[float, ...]] = None
    initial_params: Optional[Tuple[float, ...]] = None
    paper_strict_sensitivity: bool = False
    refit_every: int = 0
    rho_grid: Tuple[float, float, int] = (1e-4, 1e2, 25)
    rho_bounds: Tuple[float, float] = (1e-8, 1e8)
    gain_mode: str = "information"
    estimation: str = "batch"
    sampling_minutes: float = 15.0

    def __post_init__(self):
        validate_config(self)

    def true_param_array(self):
        return None if self.true_params is None else np.array(self.true_params, dtype=float)

    def initial_param_array(self):
        return None if self.initial_params is None else np.array(self.initial_params, dtype=float)

    def rho_grid_values(self):
        low, high, points = self.rho_grid
        return np.logspace(math.log10(low), math.log10(high), int(points))

    def to_dict(self):
        return asdict(self)


def validate_config(config):
    if config.horizon < 1:
        raise OutOfRange(f"horizon must be at least 1, got {config.horizon}")
    for name in ("target_variance_trace", "rho0", "termination_eps", "prior_variance",
                 "sampling_minutes"):
        value = getattr(config, name)
        if not value > 0:
            raise OutOfRange(f"{name} must be positive, got {value}")
    if config.noise_variance < 0:
        raise OutOfRange(f"noise_variance must be non-negative, got {config.noise_variance}")
    if config.input_change_weight < 0:
        raise OutOfRange(f"input_change_weight must be non-negative, got {config.input_change_weight}")
    if config.refit_every < 0:
        raise OutOfRange(f"refit_every must be non-negative, got {config.refit_every}")
    if config.strategy not in STRATEGIES:
        raise OutOfRange(f"strategy must be one of {STRATEGIES}, got '{config.strategy}'")
    if config.gain_mode not in GAIN_MODES:
        raise OutOfRange(f"gain_mode must be one of {GAIN_MODES}, got '{config.gain_mode}'")
    if config.estimation not in ESTIMATION_MODES:
        raise OutOfRange(f"estimation must be one of {ESTIMATION_MODES}, got '{config.estimation}'")

    low, high, points = config.rho_grid
    if not (0 < low <= high) or int(points) < 1:
        raise OutOfRange(f"rho_grid must satisfy 0 < min <= max and points >= 1, got {config.rho_grid}")
    rho_min, rho_max = config.rho_bounds
    if not 0 < rho_min <= rho_max:
        raise OutOfRange(f"rho_bounds must satisfy 0 < min <= max, got {config.rho_bounds}")

    for name in ("true_params", "initial_params"):
        params = getattr(config, name)
        if params is None:
            continue
        if len(params) == 0 or len(params) % 2:
            raise OutOfRange(f"{name} must hold an even, non-zero number of entries")
        if not all(math.isfinite(p) for p in params):
            raise OutOfRange(f"{name} must be finite")
    if config.true_params is not None:
        half = len(config.true_params) // 2
        g, b = config.true_params[:half], config.true_params[half:]
        if any(value <= 0 for value in g):
            raise OutOfRange("true conductances must be strictly positive")
        if any(value >= 0 for value in b):
            logger.warning("true susceptances are expected to be negative, got %s", list(b))


def _param_tuple(value, name):
    if isinstance(value, dict):
        for key in ("g", "b"):
            if key not in value:
                raise MissingField(f"{name} is missing '{key}'")
        if len(value["g"]) != len(value["b"]):
            raise OutOfRange(f"{name}: 'g' and 'b' must have equal length")
        value = list(value["g"]) + list(value["b"])
    try:
        return tuple(float(v) for v in value)
    except (TypeError, ValueError) as err:
        raise OutOfRange(f"{name} must be a list of numbers: {err}") from err


def config_from_mapping(document):
    """Build an ExperimentConfig from a mapping of overrides."""
    if not isinstance(document, dict):
        raise ConfigError("configuration document must be a key-value object")
    if document.get("format", CONFIG_FORMAT) != CONFIG_FORMAT:
        raise ConfigError(f"configuration format tag must be '{CONFIG_FORMAT}'")

    known = {f.name for f in fields(ExperimentConfig)}
    values = {}
    for key, value in document.items():
        if key in ("format", "version"):
            continue
        if key not in known:
            logger.warning("unknown configuration key '%s' ignored", key)
            continue
        values[key] = value

    for key in ("true_params", "initial_params"):
        if values.get(key) is not None:
            values[key] = _param_tuple(values[key], key)
    if "rho_grid" in values:
        grid = values["rho_grid"]
        if isinstance(grid, dict):
            for key in ("min", "max", "points"):
                if key not in grid:
                    raise MissingField(f"rho_grid is missing '{key}'")
            grid = (grid["min"], grid["max"], grid["points"])
        values["rho_grid"] = (float(grid[0]), float(grid[1]), int(grid[2]))
    if "rho_bounds" in values:
        values["rho_bounds"] = tuple(float(v) for v in values["rho_bounds"])

    try:
        return ExperimentConfig(**values)
    except TypeError as err:
        raise OutOfRange(str(err)) from err


def parse_experiment_config(text):
    """Parse a JSON configuration document; an empty document yields all defaults."""
    if not text.strip():
        return ExperimentConfig()
    try:
        document = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"configuration is not valid JSON: {err}") from err
    return config_from_mapping(document)


def load_experiment_config(path):
    return parse_experiment_config(Path(path).read_text(encoding="utf-8"))
