import math
from dataclasses import replace

import numpy as np
import pytest

from pittt.case_io import DatasetRecord
from pittt.errors import DimensionError, InvalidDataError
from pittt.evaluation import (BASELINE, CATEGORIES, REFINED, BenchRow, BenchTable, Metrics, bench,
                              emit_report, evaluate_model, mismatch_rmse, parse_report, violations)
from pittt.grid import GridCase, OperatingCondition, StateVector, build_ybus, flat_state, nominal_condition
from pittt.pf import newton_raphson
from pittt.scenarios import generate_dataset
from pittt.surrogate import encode_input, forward, input_stats
from pittt.ttt import TTTConfig, refine

from conftest import feasible_variant


# ---------------------------------------------------------------- RMSE

def test_rmse_of_exact_solutions(case14, small14):
    records, _ = small14
    recs = records[:10]
    _, agg = mismatch_rmse([r.label for r in recs], [r.condition for r in recs], case14)
    assert agg.rmse_p <= 1e-8 and agg.rmse_q <= 1e-8


def test_rmse_single_element(case2):
    cond = OperatingCondition(np.array([0.0, 0.3]), np.zeros(2), np.array([1.0, 0.0]))
    per, agg = mismatch_rmse([flat_state(case2, cond)], [cond], case2)
    assert agg.rmse_p == pytest.approx(0.3, abs=1e-15)
    assert agg.rmse_q == 0.0
    assert per.shape == (1, 2)


def test_rmse_matches_naive_double_loop(case14, rng):
    Y = build_ybus(case14).toarray()
    cond = nominal_condition(case14)
    states = [StateVector(rng.uniform(0.95, 1.05, 14) * np.where(cond.v_set > 0, 0, 1) + cond.v_set,
                          np.r_[0.0, rng.normal(0, 0.1, 13)]) for _ in range(2)]
    _, agg = mismatch_rmse(states, [cond, cond], case14)
    per_p, per_q = [], []
    for s in states:
        V = [s.v[i] * complex(math.cos(s.theta[i]), math.sin(s.theta[i])) for i in range(14)]
        sp, sq = 0.0, 0.0
        for i in range(14):
            inj = V[i] * sum(Y[i, k] * V[k] for k in range(14)).conjugate()
            if i in case14.non_slack:
                sp += (cond.p_spec[i] - inj.real) ** 2
            if i in case14.pq:
                sq += (cond.q_spec[i] - inj.imag) ** 2
        per_p.append(math.sqrt(sp / len(case14.non_slack)))
        per_q.append(math.sqrt(sq / len(case14.pq)))
    assert abs(agg.rmse_p - sum(per_p) / 2) <= 1e-12
    assert abs(agg.rmse_q - sum(per_q) / 2) <= 1e-12


def test_metric_inputs_checked(case14):
    with pytest.raises(InvalidDataError):
        mismatch_rmse([], [], case14)
    with pytest.raises(DimensionError):
        violations([flat_state(case14, nominal_condition(case14))], [], case14)
    with pytest.raises(ValueError):
        Metrics(-1.0, 0.0)


# ---------------------------------------------------------------- violations

def _uniform_limits(case, lo=0.94, hi=1.06):
    return GridCase(case.base_mva, [replace(b, v_min=lo, v_max=hi, v_setpoint=1.0 if b.v_setpoint else None)
                                    for b in case.buses], case.branches,
                    [replace(g, v_setpoint=1.0) for g in case.gens], name="uniform")


def test_single_voltage_violation_arithmetic(case14):
    case = _uniform_limits(case14)
    v = np.ones(case.n)
    v[9] = 1.10
    state = StateVector(v, np.zeros(case.n))
    _, agg = violations([state], [nominal_condition(case)], case)
    assert agg["voltage"].mean == pytest.approx(0.04 / case.n, rel=1e-12)
    assert agg["voltage"].max == pytest.approx(0.04, rel=1e-12)


def test_feasible_labels_have_no_violations(case14):
    case = feasible_variant(case14)
    records, _ = generate_dataset(case, n_train=0, n_test=40)
    _, agg = violations([r.label for r in records], [r.condition for r in records], case)
    for c in CATEGORIES:
        assert agg[c].max <= 1e-9


def test_max_at_least_mean_and_permutation_invariant(case14, small14, rng):
    records, params = small14
    recs = [r for r in records if r.split == "test"][:12]
    states = [StateVector(r.label.v + rng.normal(0, 0.02, 14), r.label.theta) for r in recs]
    conds = [r.condition for r in recs]
    per, agg = violations(states, conds, case14)
    for rep in per + [agg]:
        for c in CATEGORIES:
            assert rep[c].max >= rep[c].mean >= 0
    order = rng.permutation(len(recs))
    _, shuffled = violations([states[i] for i in order], [conds[i] for i in order], case14)
    for c in CATEGORIES:
        assert shuffled[c].mean == pytest.approx(agg[c].mean, rel=1e-12)
        assert shuffled[c].max == agg[c].max
    _, m1 = mismatch_rmse(states, conds, case14)
    _, m2 = mismatch_rmse([states[i] for i in order], [conds[i] for i in order], case14)
    assert m1.rmse_p == pytest.approx(m2.rmse_p, rel=1e-12) and m1.rmse_q == pytest.approx(m2.rmse_q, rel=1e-12)


def test_pipeline_never_reads_labels(case14, small14):
    records, params = small14
    test = [r for r in records if r.split == "test"][:8]
    blank = [DatasetRecord(r.condition, StateVector(np.full(14, np.nan), np.full(14, np.nan)), r.split)
             for r in test]
    cfg = TTTConfig(steps=3)
    a = evaluate_model(params, test, case14, cfg, include_reference=False)
    b = evaluate_model(params, blank, case14, cfg, include_reference=False)
    assert a.metrics == b.metrics
    assert {k: r.means() for k, r in a.violations.items()} == {k: r.means() for k, r in b.violations.items()}


def test_evaluate_requires_test_split(case14, small14):
    records, params = small14
    with pytest.raises(InvalidDataError):
        evaluate_model(params, [r for r in records if r.split == "train"][:3], case14, TTTConfig())


# ---------------------------------------------------------------- runtime

def test_bench_orderings(case14, ybus14, small14):
    records, params = small14
    conds = [r.condition for r in records if r.split == "test"]
    stats = input_stats(params)
    table = bench({
        "nr": lambda c: newton_raphson(case14, c, ybus=ybus14),
        "forward": lambda c: forward(params, encode_input(c, case14, stats)),
        "k0": lambda c: refine(params, c, case14, ybus14, TTTConfig(steps=0)),
    }, conds, repetitions=4)
    rows = table.by_label()
    assert rows["forward"].ms_per_sample < rows["nr"].ms_per_sample
    assert rows["k0"].ms_per_sample < rows["nr"].ms_per_sample
    nr_reps = rows["nr"].repetition_ms
    assert len(nr_reps) == 3 and rows["nr"].ms_per_sample == pytest.approx(np.mean(nr_reps), rel=1e-12)
    assert "cores" in table.machine


def test_bench_needs_warmup_repetition():
    with pytest.raises(ValueError):
        bench({"x": lambda s: s}, [1], repetitions=1)


# ---------------------------------------------------------------- reports

def _reports(case14, small14):
    records, params = small14
    return evaluate_model(params, [r for r in records if r.split == "test"][:6], case14, TTTConfig(steps=2))


def test_report_round_trip(tmp_path, case14, small14):
    out = _reports(case14, small14)
    table = BenchTable([BenchRow("nr", 1.25, 6, (1.0, 1.5)), BenchRow("surrogate", 0.1 / 3, 6, (0.03, 0.03))])
    emit_report(tmp_path, out.metrics, out.violations, table, {"seed": 1})
    doc = parse_report(tmp_path)
    assert doc["accuracy"] == out.metrics
    for method, rep in out.violations.items():
        for c in CATEGORIES:
            assert doc["violations"][method][f"{c}_mean"] == rep[c].mean
            assert doc["violations"][method][f"{c}_max"] == rep[c].max
    assert doc["runtime"] == {"nr": (1.25, 6), "surrogate": (0.1 / 3, 6)}
    text = (tmp_path / "report.txt").read_text()
    for heading in ("Mismatch accuracy", "Operational constraint violations", "per-sample runtime",
                    "Configuration", "Conventions"):
        assert heading in text
    header = (tmp_path / "violations.csv").read_text().splitlines()[0].split(",")
    assert header == ["method"] + [f"{c}_{s}" for c in CATEGORIES for s in ("mean", "max")]
    assert [BASELINE, REFINED] == list(doc["accuracy"])[:2]


def test_skipped_bench_omits_table(tmp_path, case14, small14):
    out = _reports(case14, small14)
    (tmp_path / "runtime.csv").write_text("stale")
    emit_report(tmp_path, out.metrics, out.violations, None, {})
    assert not (tmp_path / "runtime.csv").exists()
    assert "runtime" not in parse_report(tmp_path)
    assert "runtime" not in (tmp_path / "report.txt").read_text()

