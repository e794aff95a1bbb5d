"""
Algebraic grid model: line flows, residual injections, the measurement
function and their analytic first derivatives.

Vector layouts used everywhere in the package:

* state x      (v_k, theta_k) for every non-slack bus k, bus order ascending
* input u      (p_k^g, q_k^g) for every non-slack bus, zero where k hosts no generator
* injection S  (P_k, Q_k) for every non-slack bus, same order as u
* params y     (g_1 .. g_L, b_1 .. b_L), line order of the case
* measurement  (x; P_1, Q_1, ..., P_L, Q_L) with flows oriented from -> to

Matrices are dense; at the sizes handled here sparsity buys nothing, and a
sparse variant would only have to replace the scatter in ``_evaluate``.
"""

import logging
import math
from collections import namedtuple
from functools import lru_cache

import numpy as np

from src.errors import DimensionMismatch, UnknownLine

logger = logging.getLogger(__name__)

# angles are never wrapped; the bound keeps every difference inside (-pi, pi)
ANGLE_LIMIT = math.pi / 2

Jacobians = namedtuple("Jacobians", ["dS_dx", "dS_dy", "dM_dx", "dM_dy"])

BranchTerms = namedtuple("BranchTerms", [
    "p", "q",
    "dp_dvk", "dp_dvl", "dp_ddth",
    "dq_dvk", "dq_dvl", "dq_ddth",
    "dp_dg", "dp_db", "dq_dg", "dq_db",
])


def branch_terms(vk, vl, dth, g, b):
    """
    Flow over a line seen from bus k and its partial derivatives.

    P = g (vk^2 - vk vl cos) - b vk vl sin
    Q = -b (vk^2 - vk vl cos) - g vk vl sin,   with cos, sin of theta_k - theta_l.
    Works element-wise on arrays.
    """
    c, s = np.cos(dth), np.sin(dth)
    a = vk * vk - vk * vl * c
    w = vk * vl * s
    return BranchTerms(
        p=g * a - b * w,
        q=-b * a - g * w,
        dp_dvk=g * (2.0 * vk - vl * c) - b * vl * s,
        dp_dvl=-g * vk * c - b * vk * s,
        dp_ddth=g * w - b * vk * vl * c,
        dq_dvk=-b * (2.0 * vk - vl * c) - g * vl * s,
        dq_dvl=b * vk * c - g * vk * s,
        dq_ddth=-b * w - g * vk * vl * c,
        dp_dg=a,
        dp_db=-w,
        dq_dg=-w,
        dq_db=-a,
    )


class GridModel:
    """
    Index bookkeeping and model evaluation for one GridCase.

    Instances are immutable after construction and safe to share between
    threads; use :func:`grid_model` to get a cached instance.
    """

    def __init__(self, case):
        self.case = case
        self.n_buses = case.n_buses
        self.n_lines = case.n_lines
        self.slack = case.slack_bus - 1
        self.slack_voltage = case.bus(case.slack_bus).v_set

        self.non_slack = np.array([i for i in range(self.n_buses) if i != self.slack], dtype=int)
        self.n_state = 2 * len(self.non_slack)
        self.n_params = 2 * self.n_lines
        self.n_measurements = self.n_state + 2 * self.n_lines

        # rows/columns of the full (v_i, theta_i) bus layout kept in reduced vectors
        self.state_cols = np.ravel(np.column_stack([2 * self.non_slack, 2 * self.non_slack + 1]))

        self.from_idx = np.array([line.from_bus - 1 for line in case.lines], dtype=int)
        self.to_idx = np.array([line.to_bus - 1 for line in case.lines], dtype=int)
        self._line_lookup = {}
        for j, line in enumerate(case.lines):
            self._line_lookup[(line.from_bus, line.to_bus)] = (j, False)
            self._line_lookup[(line.to_bus, line.from_bus)] = (j, True)

        position = {int(bus): pos for pos, bus in enumerate(self.non_slack)}
        self.control_buses = tuple(
            gen.bus for gen in sorted(case.generators, key=lambda gen: gen.bus)
            if gen.bus - 1 != self.slack
        )
        cols = []
        for bus in self.control_buses:
            pos = position[bus - 1]
            cols.extend([2 * pos, 2 * pos + 1])
        self.control_cols = np.array(cols, dtype=int)
        self.slack_generator = case.generator_at(case.slack_bus)

    # -- layout helpers ---------------------------------------------------

    def bus_voltages(self, x):
        """Full-length magnitude and angle arrays, slack values inserted."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_state,):
            raise DimensionMismatch(f"state has shape {x.shape}, expected ({self.n_state},)")
        v = np.empty(self.n_buses, dtype=x.dtype)
        th = np.empty(self.n_buses, dtype=x.dtype)
        v[self.slack], th[self.slack] = self.slack_voltage, 0.0
        v[self.non_slack] = x[0::2]
        th[self.non_slack] = x[1::2]
        return v, th

    def check_params(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n_params,):
            raise DimensionMismatch(f"line parameters have shape {y.shape}, expected ({self.n_params},)")
        return y

    def check_input(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape != (self.n_state,):
            raise DimensionMismatch(f"input has shape {u.shape}, expected ({self.n_state},)")
        mask = np.ones(self.n_state, dtype=bool)
        mask[self.control_cols] = False
        if np.any(u[mask] != 0.0):
            raise DimensionMismatch("input has nonzero entries at buses without a generator")
        return u

    def split_params(self, y):
        y = self.check_params(y)
        return y[:self.n_lines], y[self.n_lines:]

    def flat_state(self):
        x = np.zeros(self.n_state)
        x[0::2] = self.slack_voltage
        return x

    def demand_vector(self):
        d = np.zeros(self.n_state)
        for pos, i in enumerate(self.non_slack):
            bus = self.case.buses[i]
            d[2 * pos], d[2 * pos + 1] = bus.p_d, bus.q_d
        return d

    def slack_demand(self):
        bus = self.case.buses[self.slack]
        return bus.p_d, bus.q_d

    def controls(self, u):
        return np.asarray(u, dtype=float)[self.control_cols]

    def input_from_controls(self, uc):
        u = np.zeros(self.n_state)
        u[self.control_cols] = uc
        return u

    def input_from_generation(self, generation):
        """Build u from a mapping bus -> (p, q); the slack entry, if present, is ignored."""
        u = np.zeros(self.n_state)
        for k, bus in enumerate(self.control_buses):
            p, q = generation.get(bus, (0.0, 0.0))
            u[self.control_cols[2 * k]] = p
            u[self.control_cols[2 * k + 1]] = q
        return u

    def generation_from_input(self, u):
        """Mapping bus -> (p, q) for every non-slack generator."""
        u = np.asarray(u, dtype=float)
        return {
            bus: (float(u[self.control_cols[2 * k]]), float(u[self.control_cols[2 * k + 1]]))
            for k, bus in enumerate(self.control_buses)
        }

    def state_bounds(self, relax=0.0):
        """Box on x; ``relax`` widens every bound by that fraction of its magnitude."""
        lo = np.empty(self.n_state)
        hi = np.empty(self.n_state)
        for pos, i in enumerate(self.non_slack):
            bus = self.case.buses[i]
            lo[2 * pos], hi[2 * pos] = bus.v_min, bus.v_max
            lo[2 * pos + 1], hi[2 * pos + 1] = -ANGLE_LIMIT, ANGLE_LIMIT
        if relax:
            lo = lo - relax * np.abs(lo)
            hi = hi + relax * np.abs(hi)
        return lo, hi

    def control_bounds(self):
        lo, hi = [], []
        for bus in self.control_buses:
            gen = self.case.generator_at(bus)
            lo.extend([gen.p_min, gen.q_min])
            hi.extend([gen.p_max, gen.q_max])
        return np.array(lo), np.array(hi)

    # -- evaluation -------------------------------------------------------

    def _evaluate(self, x, y, derivatives):
        v, th = self.bus_voltages(x)
        g, b = self.split_params(y)
        f, t = self.from_idx, self.to_idx
        dth = th[f] - th[t]
        ft = branch_terms(v[f], v[t], dth, g, b)
        tf = branch_terms(v[t], v[f], -dth, g, b)

        n, L = self.n_buses, self.n_lines
        S = np.zeros(2 * n)
        np.add.at(S, 2 * f, ft.p)
        np.add.at(S, 2 * f + 1, ft.q)
        np.add.at(S, 2 * t, tf.p)
        np.add.at(S, 2 * t + 1, tf.q)
        flows = np.ravel(np.column_stack([ft.p, ft.q]))
        if not derivatives:
            return S, flows, None

        dS_dbus = np.zeros((2 * n, 2 * n))
        dS_dy = np.zeros((2 * n, 2 * L))
        dF_dbus = np.zeros((2 * L, 2 * n))
        dF_dy = np.zeros((2 * L, 2 * L))

        def scatter(jac, jac_y, rows, k, l, terms, j):
            rp, rq = rows
            jac[rp, 2 * k] += terms.dp_dvk[j]
            jac[rp, 2 * l] += terms.dp_dvl[j]
            jac[rp, 2 * k + 1] += terms.dp_ddth[j]
            jac[rp, 2 * l + 1] -= terms.dp_ddth[j]
            jac[rq, 2 * k] += terms.dq_dvk[j]
            jac[rq, 2 * l] += terms.dq_dvl[j]
            jac[rq, 2 * k + 1] += terms.dq_ddth[j]
            jac[rq, 2 * l + 1] -= terms.dq_ddth[j]
            jac_y[rp, j] += terms.dp_dg[j]
            jac_y[rp, L + j] += terms.dp_db[j]
            jac_y[rq, j] += terms.dq_dg[j]
            jac_y[rq, L + j] += terms.dq_db[j]

        for j in range(L):
            k, l = f[j], t[j]
            scatter(dS_dbus, dS_dy, (2 * k, 2 * k + 1), k, l, ft, j)
            scatter(dS_dbus, dS_dy, (2 * l, 2 * l + 1), l, k, tf, j)
            scatter(dF_dbus, dF_dy, (2 * j, 2 * j + 1), k, l, ft, j)
        return S, flows, (dS_dbus, dS_dy, dF_dbus, dF_dy)

    def line_flow(self, x, y, line):
        """Active and reactive flow Pi_{k,l} over ``line`` = (k, l), oriented k -> l."""
        key = tuple(int(i) for i in line)
        if key not in self._line_lookup:
            raise UnknownLine(f"no line between buses {key[0]} and {key[1]}")
        j, reverse = self._line_lookup[key]
        v, th = self.bus_voltages(x)
        g, b = self.split_params(y)
        k, l = (self.to_idx[j], self.from_idx[j]) if reverse else (self.from_idx[j], self.to_idx[j])
        terms = branch_terms(v[k], v[l], th[k] - th[l], g[j], b[j])
        return float(terms.p), float(terms.q)

    def full_injection(self, x, y):
        return self._evaluate(x, y, derivatives=False)[0]

    def residual_injection(self, x, y):
        """S(x, y) over the non-slack buses."""
        return self.full_injection(x, y)[self.state_cols]

    def slack_injection(self, x, y):
        S = self.full_injection(x, y)
        return S[2 * self.slack], S[2 * self.slack + 1]

    def slack_jacobian(self, x, y):
        """Derivatives of the slack injection (P, Q) with respect to x and y."""
        _, _, (dS_dbus, dS_dy, _, _) = self._evaluate(x, y, derivatives=True)
        rows = [2 * self.slack, 2 * self.slack + 1]
        return dS_dbus[np.ix_(rows, self.state_cols)], dS_dy[rows]

    def measurement(self, x, y):
        """
        Measurement vector (x; P_1, Q_1, ..., P_L, Q_L): the state, then the
        active and reactive sending-end flow of each line, interleaved per
        line in the order of ``case.lines``. Length n_state + 2L.
        """
        _, flows, _ = self._evaluate(x, y, derivatives=False)
        return np.concatenate([np.asarray(x, dtype=float), flows])

    def jacobians(self, x, y):
        """Analytic dS/dx, dS/dy, dM/dx, dM/dy at (x, y)."""
        _, _, (dS_dbus, dS_dy, dF_dbus, dF_dy) = self._evaluate(x, y, derivatives=True)
        rows = self.state_cols
        dS_dx = dS_dbus[np.ix_(rows, rows)]
        dM_dx = np.vstack([np.eye(self.n_state), dF_dbus[:, rows]])
        dM_dy = np.vstack([np.zeros((self.n_state, self.n_params)), dF_dy])
        return Jacobians(dS_dx=dS_dx, dS_dy=dS_dy[rows], dM_dx=dM_dx, dM_dy=dM_dy)

    def losses(self, x, y):
        """Total active power loss; non-negative whenever every g >= 0."""
        return float(np.sum(self.full_injection(x, y)[0::2]))


@lru_cache(maxsize=64)
def grid_model(case):
    return GridModel(case)


def line_flow(case, x, y, line):
    return grid_model(case).line_flow(x, y, line)


def residual_injection(case, x, y):
    return grid_model(case).residual_injection(x, y)


def measurement(case, x, y):
    return grid_model(case).measurement(x, y)


def jacobians(case, x, y):
    return grid_model(case).jacobians(x, y)
