from dataclasses import replace

import numpy as np
import pytest

from pittt.case_io import load_case, parse_case
from pittt.grid import GridCase, build_ybus
from pittt.scenarios import generate_dataset
from pittt.surrogate import TrainConfig, train

TWO_BUS = """
function mpc = two_bus
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
    1  3  0   0   0  0  1  1.0  0  230  1  1.1  0.9;
    2  1  {pd}  {qd}  0  0  1  1.0  0  230  1  1.1  0.9;
];
mpc.gen = [
    1  0  0  300  -300  1.0  100  1  500  0;
];
mpc.branch = [
    1  2  {r}  0.1  0  0  0  0  0  0  1  -360  360;
];
"""


def two_bus_text(pd=0.0, qd=0.0, r=0.0):
    return TWO_BUS.format(pd=pd, qd=qd, r=r)


@pytest.fixture(scope="session")
def case2():
    return parse_case(two_bus_text(), name="two_bus")


@pytest.fixture(scope="session")
def case14():
    return load_case("case14")


@pytest.fixture(scope="session")
def case118():
    return load_case("case118")


@pytest.fixture(scope="session")
def ybus14(case14):
    return build_ybus(case14)


@pytest.fixture(scope="session")
def small14(case14):
    """A quickly trained case14 surrogate with its records (not the acceptance model)."""
    records, _ = generate_dataset(case14, n_train=200, n_test=30)
    params, _ = train(records, case14, TrainConfig(epochs=40, seed=3))
    return records, params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def feasible_variant(case, q_margin=10.0):
    """Copy with generator setpoints clipped into bus limits and reactive limits relaxed,
    so that power-flow solutions near nominal satisfy every operating limit."""
    def clip(v, bus):
        return min(max(v, bus.v_min), bus.v_max)
    buses = [replace(b, v_setpoint=clip(b.v_setpoint, b)) if b.v_setpoint is not None else b for b in case.buses]
    gens = [replace(g, v_setpoint=clip(g.v_setpoint, case.buses[g.bus]), q_min=-q_margin, q_max=q_margin)
            for g in case.gens]
    return GridCase(case.base_mva, buses, case.branches, gens, name=case.name + "-feasible")


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
