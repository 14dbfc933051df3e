"""Static network model, admittance assembly and unknown-vector bookkeeping.

All quantities are per-unit on the system base; angles are radians.

Unknown ordering (shared by the Newton solver, the surrogate output layer and
test-time refinement): voltage angles of all non-slack buses in ascending bus
index, followed by voltage magnitudes of all PQ buses in ascending bus index.
"""
from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import DimensionError, InvalidDataError, TopologyError


class BusKind(enum.IntEnum):
    PQ = 1
    PV = 2
    SLACK = 3


@dataclass(frozen=True)
class Bus:
    index: int
    kind: BusKind
    p_load: float
    q_load: float
    g_shunt: float
    b_shunt: float
    v_min: float
    v_max: float
    v_setpoint: Optional[float] = None
    ext_id: int = 0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    rating: Optional[float] = None

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise TopologyError(f"branch {self.from_bus}-{self.to_bus} connects a bus to itself")
        if self.r * self.r + self.x * self.x <= 0.0:
            raise TopologyError(f"zero-impedance branch {self.from_bus}-{self.to_bus}")


@dataclass(frozen=True)
class Generator:
    bus: int
    p_set: float
    q_min: float
    q_max: float
    p_min: float
    p_max: float
    v_setpoint: float

    def __post_init__(self):
        if self.q_min > self.q_max or self.p_min > self.p_max:
            raise InvalidDataError(f"generator at bus {self.bus} has inverted limits")


@dataclass(frozen=True)
class StateVector:
    v: np.ndarray
    theta: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, StateVector)
                and np.array_equal(self.v, other.v) and np.array_equal(self.theta, other.theta))

    @property
    def n(self):
        return len(self.v)

    @property
    def complex(self):
        return self.v * np.exp(1j * self.theta)


@dataclass(frozen=True)
class OperatingCondition:
    """One scenario z.

    ``p_spec``/``q_spec`` are net injections (generation minus load). At buses
    where a quantity is a free variable of the power flow (P at the slack, Q at
    PV and slack buses) the entry holds the negated load only, so that
    generation can be recovered as calc minus spec. ``v_set`` is zero at PQ buses.
    """
    p_spec: np.ndarray
    q_spec: np.ndarray
    v_set: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, OperatingCondition)
                and np.array_equal(self.p_spec, other.p_spec)
                and np.array_equal(self.q_spec, other.q_spec)
                and np.array_equal(self.v_set, other.v_set))

    @property
    def n(self):
        return len(self.p_spec)


@dataclass(frozen=True, eq=False)
class GridCase:
    base_mva: float
    buses: tuple
    branches: tuple
    gens: tuple
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "gens", tuple(self.gens))
        if self.base_mva <= 0:
            raise InvalidDataError("nonpositive baseMVA")
        n = len(self.buses)
        for i, bus in enumerate(self.buses):
            if bus.index != i:
                raise InvalidDataError(f"bus indices must be contiguous from 0, got {bus.index} at {i}")
            if not bus.v_min < bus.v_max:
                raise InvalidDataError(f"bus {bus.ext_id}: v_min >= v_max")
        n_slack = sum(b.kind == BusKind.SLACK for b in self.buses)
        if n_slack == 0:
            raise InvalidDataError("zero slack buses")
        if n_slack > 1:
            raise InvalidDataError("multiple slack buses")
        for br in self.branches:
            if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
                raise InvalidDataError(f"branch references unknown bus {br.from_bus}-{br.to_bus}")
        for g in self.gens:
            if not 0 <= g.bus < n:
                raise InvalidDataError(f"generator references unknown bus {g.bus}")
            if self.buses[g.bus].kind == BusKind.PQ:
                raise InvalidDataError(f"generator on PQ bus {self.buses[g.bus].ext_id}")
        for bus in self.buses:
            if bus.kind != BusKind.PQ and bus.v_setpoint is not None \
                    and not bus.v_min <= bus.v_setpoint <= bus.v_max:
                warnings.warn(f"{self.name or 'case'}: bus {bus.ext_id} setpoint {bus.v_setpoint} "
                              f"outside [{bus.v_min}, {bus.v_max}]", stacklevel=3)

    @property
    def n(self):
        return len(self.buses)

    @cached_property
    def kinds(self):
        return np.array([b.kind for b in self.buses], dtype=int)

    @cached_property
    def slack_index(self):
        return int(np.flatnonzero(self.kinds == BusKind.SLACK)[0])

    @cached_property
    def pv(self):
        return np.flatnonzero(self.kinds == BusKind.PV)

    @cached_property
    def pq(self):
        return np.flatnonzero(self.kinds == BusKind.PQ)

    @cached_property
    def non_slack(self):
        return np.flatnonzero(self.kinds != BusKind.SLACK)

    @cached_property
    def gen_buses(self):
        """Buses hosting at least one generator, ascending."""
        return np.unique([g.bus for g in self.gens]).astype(int)

    @property
    def n_unknowns(self):
        return len(self.non_slack) + len(self.pq)

    @cached_property
    def unknown_columns(self):
        """Per-bus position of theta and |V| in the unknown vector (-1 where fixed)."""
        n_ns = len(self.non_slack)
        theta_col = np.full(self.n, -1)
        theta_col[self.non_slack] = np.arange(n_ns)
        v_col = np.full(self.n, -1)
        v_col[self.pq] = n_ns + np.arange(len(self.pq))
        return theta_col, v_col

    @cached_property
    def p_load(self):
        return np.array([b.p_load for b in self.buses])

    @cached_property
    def q_load(self):
        return np.array([b.q_load for b in self.buses])

    @cached_property
    def v_min(self):
        return np.array([b.v_min for b in self.buses])

    @cached_property
    def v_max(self):
        return np.array([b.v_max for b in self.buses])

    @cached_property
    def v_setpoint(self):
        return np.array([b.v_setpoint if b.kind != BusKind.PQ and b.v_setpoint is not None else 0.0
                         for b in self.buses])

    @cached_property
    def ratings(self):
        """Branch ratings with NaN marking unlimited branches."""
        return np.array([np.nan if br.rating is None else br.rating for br in self.branches])

    @cached_property
    def gen_aggregate(self):
        """Per generator bus: summed (q_min, q_max, p_min, p_max, p_set)."""
        agg = {}
        for g in self.gens:
            a = agg.setdefault(g.bus, np.zeros(5))
            a += (g.q_min, g.q_max, g.p_min, g.p_max, g.p_set)
        return np.array([agg[b] for b in self.gen_buses]).reshape(-1, 5)

    @cached_property
    def branch_admittances(self):
        return _branch_admittances(self.branches)


def _branch_admittances(branches: Sequence[Branch]):
    """pi-model two-port admittances (from, to, yff, yft, ytf, ytt) per branch.

    With complex tap a = tap * exp(j*shift):
    yff = (ys + j b/2) / |a|^2, yft = -ys / conj(a), ytf = -ys / a, ytt = ys + j b/2.
    """
    f = np.array([br.from_bus for br in branches], dtype=int)
    t = np.array([br.to_bus for br in branches], dtype=int)
    r = np.array([br.r for br in branches], dtype=float)
    x = np.array([br.x for br in branches], dtype=float)
    b = np.array([br.b_charging for br in branches], dtype=float)
    a = np.array([br.tap * np.exp(1j * br.shift) for br in branches], dtype=complex)
    ys = 1.0 / (r + 1j * x)
    ytt = ys + 0.5j * b
    yff = ytt / (a * np.conj(a))
    yft = -ys / np.conj(a)
    ytf = -ys / a
    return f, t, yff, yft, ytf, ytt


def check_connected(case: GridCase):
    n = case.n
    f, t = case.branch_admittances[:2]
    adj = sp.coo_matrix((np.ones(len(f)), (f, t)), shape=(n, n))
    n_comp, labels = connected_components(adj, directed=False)
    if n_comp > 1:
        isolated = [case.buses[i].ext_id for i in np.flatnonzero(labels != labels[case.slack_index])]
        raise TopologyError(f"network is disconnected; buses unreachable from slack: {isolated[:10]}")


def build_ybus(case: GridCase) -> sp.csr_matrix:
    """Assemble the complex bus admittance matrix as a CSR matrix with sorted indices."""
    check_connected(case)
    n = case.n
    f, t, yff, yft, ytf, ytt = case.branch_admittances
    ysh = np.array([b.g_shunt + 1j * b.b_shunt for b in case.buses])
    rows = np.concatenate([f, f, t, t, np.arange(n)])
    cols = np.concatenate([f, t, f, t, np.arange(n)])
    vals = np.concatenate([yff, yft, ytf, ytt, ysh])
    ybus = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    ybus.sum_duplicates()
    ybus.sort_indices()
    return ybus


def flat_state(case: GridCase, condition: OperatingCondition) -> StateVector:
    v = np.where(case.kinds == BusKind.PQ, 1.0, condition.v_set)
    return StateVector(v=v.astype(float), theta=np.zeros(case.n))


def full_state(case: GridCase, condition: OperatingCondition, unknowns) -> StateVector:
    """Place an unknown vector into a full (V, theta) state using the condition's setpoints."""
    unknowns = np.asarray(unknowns, dtype=float)
    if unknowns.shape != (case.n_unknowns,):
        raise DimensionError(f"unknown vector has shape {unknowns.shape}, expected ({case.n_unknowns},)")
    if condition.n != case.n:
        raise DimensionError(f"condition has {condition.n} buses, case has {case.n}")
    n_ns = len(case.non_slack)
    theta = np.zeros(case.n)
    theta[case.non_slack] = unknowns[:n_ns]
    v = np.array(condition.v_set, dtype=float)
    v[case.pq] = unknowns[n_ns:]
    return StateVector(v=v, theta=theta)


def extract_unknowns(case: GridCase, state: StateVector) -> np.ndarray:
    if state.n != case.n:
        raise DimensionError(f"state has {state.n} buses, case has {case.n}")
    return np.concatenate([state.theta[case.non_slack], state.v[case.pq]])


def nominal_condition(case: GridCase) -> OperatingCondition:
    """Injections of the unperturbed case."""
    p_gen = np.zeros(case.n)
    for g in case.gens:
        if g.bus != case.slack_index:
            p_gen[g.bus] += g.p_set
    return OperatingCondition(p_spec=p_gen - case.p_load, q_spec=-case.q_load.copy(),
                              v_set=case.v_setpoint.copy())
