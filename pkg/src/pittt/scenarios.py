"""Perturbed operating conditions and NR-labelled datasets."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .case_io import DatasetRecord
from .errors import SingularJacobianError
from .grid import GridCase, OperatingCondition, build_ybus
from .pf import compute_mismatch, newton_raphson

CORRELATION_MODES = ("independent_per_bus", "global_plus_noise")


@dataclass(frozen=True)
class PerturbationSpec:
    """Uniform multiplicative perturbation bounds.

    Under ``global_plus_noise`` every bus shares one factor drawn from
    [low, high], multiplied by ``1 + noise * U(-1, 1)`` per bus.
    """
    load_scale_low: float = 0.9
    load_scale_high: float = 1.1
    gen_scale_low: float = 0.9
    gen_scale_high: float = 1.1
    correlation_mode: str = "independent_per_bus"
    seed: int = 0
    noise: float = 0.02

    def __post_init__(self):
        if not 0 < self.load_scale_low <= self.load_scale_high:
            raise ValueError(f"need 0 < load_scale_low <= load_scale_high, got "
                             f"[{self.load_scale_low}, {self.load_scale_high}]")
        if not 0 < self.gen_scale_low <= self.gen_scale_high:
            raise ValueError(f"need 0 < gen_scale_low <= gen_scale_high, got "
                             f"[{self.gen_scale_low}, {self.gen_scale_high}]")
        if self.correlation_mode not in CORRELATION_MODES:
            raise ValueError(f"correlation_mode must be one of {CORRELATION_MODES}")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")

    def bounds(self):
        return (self.load_scale_low, self.load_scale_high, self.gen_scale_low, self.gen_scale_high)


DEFAULT_TRAIN_SPEC = PerturbationSpec(0.9, 1.1, 0.9, 1.1, seed=0)
DEFAULT_TEST_SPEC = PerturbationSpec(0.8, 1.2, 0.8, 1.2, seed=1)


@dataclass(frozen=True)
class NRSettings:
    tol: float = 1e-8
    max_iter: int = 20


def _scales(rng, n, low, high, spec):
    if spec.correlation_mode == "independent_per_bus":
        return rng.uniform(low, high, size=n)
    g = rng.uniform(low, high)
    return g * (1.0 + spec.noise * rng.uniform(-1.0, 1.0, size=n))


def sample_condition(case: GridCase, spec: PerturbationSpec, draw_index: int) -> OperatingCondition:
    """Deterministic perturbed condition for ``(spec.seed, draw_index)``.

    Loads (P and Q, constant power factor) are scaled per bus. Non-slack
    generation is scaled per unit by its own draw and by the ratio of total
    perturbed load to total nominal load, so dispatch tracks demand.
    """
    rng = np.random.default_rng([spec.seed, draw_index])
    n = case.n
    load_scale = _scales(rng, n, spec.load_scale_low, spec.load_scale_high, spec)
    gen_units = [g for g in case.gens if g.bus != case.slack_index]
    gen_scale = _scales(rng, len(gen_units), spec.gen_scale_low, spec.gen_scale_high, spec)

    p_load = case.p_load * load_scale
    q_load = case.q_load * load_scale
    total0 = case.p_load.sum()
    ratio = p_load.sum() / total0 if total0 != 0 else 1.0
    p_gen = np.zeros(n)
    for g, s in zip(gen_units, gen_scale):
        p_gen[g.bus] += g.p_set * s * ratio
    return OperatingCondition(p_spec=p_gen - p_load, q_spec=-q_load, v_set=case.v_setpoint.copy())


@dataclass
class GenerationReport:
    requested: dict = field(default_factory=dict)
    produced: dict = field(default_factory=dict)
    dropped: dict = field(default_factory=dict)
    dropped_indices: dict = field(default_factory=dict)
    train_spec: dict = field(default_factory=dict)
    test_spec: dict = field(default_factory=dict)
    nr: dict = field(default_factory=dict)

    def as_dict(self):
        return asdict(self)


def _solve_draws(args):
    case, spec, indices, nr = args
    ybus = build_ybus(case)
    out = []
    for k in indices:
        cond = sample_condition(case, spec, k)
        try:
            res = newton_raphson(case, cond, tol=nr.tol, max_iter=nr.max_iter, ybus=ybus)
        except SingularJacobianError:
            out.append((k, cond, None))
            continue
        out.append((k, cond, res.state if res.converged else None))
    return out


def _chunks(indices, jobs):
    size = max(1, -(-len(indices) // (4 * jobs)))
    return [indices[i:i + size] for i in range(0, len(indices), size)]


def generate_dataset(case: GridCase, train_spec: PerturbationSpec = DEFAULT_TRAIN_SPEC,
                     test_spec: PerturbationSpec = DEFAULT_TEST_SPEC, n_train: int = 1000,
                     n_test: int = 200, nr: NRSettings = NRSettings(), jobs: int = 1):
    """Sample and solve scenarios. Non-converged draws are dropped and counted.

    The output depends only on the arguments, never on ``jobs``.
    """
    if n_train < 0 or n_test < 0:
        raise ValueError("counts must be nonnegative")
    if train_spec.bounds() == test_spec.bounds() and (n_train and n_test):
        raise ValueError("train and test perturbation specs must differ in at least one bound")
    report = GenerationReport(requested={"train": n_train, "test": n_test},
                              train_spec=asdict(train_spec), test_spec=asdict(test_spec), nr=asdict(nr))
    records = []
    ybus = build_ybus(case)
    for split, spec, count in (("train", train_spec, n_train), ("test", test_spec, n_test)):
        tasks = [(case, spec, chunk, nr) for chunk in _chunks(list(range(count)), max(jobs, 1))] if count else []
        if jobs > 1 and len(tasks) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = [r for chunk in pool.map(_solve_draws, tasks) for r in chunk]
        else:
            results = [r for t in tasks for r in _solve_draws(t)]
        dropped = []
        for k, cond, state in results:
            if state is None:
                dropped.append(k)
                continue
            # labels are re-verified rather than trusted
            if compute_mismatch(state, cond, ybus, case).max_abs() > nr.tol:
                dropped.append(k)
                continue
            records.append(DatasetRecord(condition=cond, label=state, split=split))
        report.produced[split] = count - len(dropped)
        report.dropped[split] = len(dropped)
        report.dropped_indices[split] = dropped
    return records, report
