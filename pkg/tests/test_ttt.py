import copy
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pittt.errors import DimensionError
from pittt.grid import (GridCase, OperatingCondition, build_ybus, extract_unknowns, full_state,
                        nominal_condition)
from pittt.pf import branch_flows, compute_jacobian, compute_mismatch, newton_raphson
from pittt.surrogate import (SurrogateParams, backward_output_to_adapt, encode_input, forward, init_params,
                             input_stats)
from pittt.ttt import (PROFILES, TTTConfig, grad_ttt_wrt_state, penalty_flow, penalty_volt, project_phi,
                       refine, refine_batch, ttt_loss)


def _widened(case, lo=0.5, hi=1.5):
    """Copy with voltage limits wide enough that every state of interest is interior."""
    return GridCase(case.base_mva, [replace(b, v_min=lo, v_max=hi) for b in case.buses], case.branches,
                    case.gens, name=case.name + "-wide")


def _rated(case, factor=0.6):
    """Copy whose branch ratings are a fraction of the nominal flows, so the flow term is active."""
    state = newton_raphson(case, nominal_condition(case)).state
    mags = branch_flows(state, case).s_mag
    branches = [replace(br, rating=max(factor * m, 1e-3)) for br, m in zip(case.branches, mags)]
    return GridCase(case.base_mva, case.buses, branches, case.gens, name=case.name + "-rated")


def _perturbed_state(case, cond, rng, spread=0.05):
    u = extract_unknowns(case, newton_raphson(case, cond).state)
    n_ns = len(case.non_slack)
    u[:n_ns] += rng.normal(0, spread, n_ns)
    u[n_ns:] += rng.normal(0, spread, len(case.pq))
    return full_state(case, cond, u)


def _fd_grad(case, cond, ybus, config, state, h=1e-6):
    u = extract_unknowns(case, state)
    g = np.empty_like(u)
    for k in range(len(u)):
        e = np.zeros_like(u)
        e[k] = h
        fp = ttt_loss(full_state(case, cond, u + e), cond, case, ybus, config)[0]
        fm = ttt_loss(full_state(case, cond, u - e), cond, case, ybus, config)[0]
        g[k] = (fp - fm) / (2 * h)
    return g


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


# ---------------------------------------------------------------- penalties

@pytest.mark.parametrize("v, expected", [(1.02, 0.0), (1.10, 1.6e-3), (0.90, 1.6e-3)])
def test_penalty_volt_examples(v, expected):
    assert penalty_volt(v, 0.94, 1.06) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("s, rating, expected", [(0.8, 1.0, 0.0), (1.25, 1.0, 0.0625), (7.0, None, 0.0)])
def test_penalty_flow_examples(s, rating, expected):
    assert penalty_flow(s, rating) == pytest.approx(expected, abs=1e-15)


def test_penalty_flow_vector_nan_unlimited():
    assert penalty_flow([1.25, 9.0], [1.0, np.nan]) == pytest.approx(0.0625)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.5, 1.5), min_size=1, max_size=20))
def test_penalty_volt_nonnegative_and_zero_inside(v):
    v = np.array(v)
    assert penalty_volt(v, 0.94, 1.06) >= 0
    assert penalty_volt(np.clip(v, 0.94, 1.06), 0.94, 1.06) == 0


# ---------------------------------------------------------------- loss

def test_loss_zero_at_interior_solution(case14):
    case = _widened(case14)
    Y = build_ybus(case)
    cond = nominal_condition(case)
    state = newton_raphson(case, cond, tol=1e-10).state
    loss, _ = ttt_loss(state, cond, case, Y, TTTConfig())
    assert loss <= 1e-20 * case.n_unknowns


def test_loss_without_penalties_is_squared_mismatch(case14, ybus14, rng):
    cond = nominal_condition(case14)
    state = _perturbed_state(case14, cond, rng)
    cfg = TTTConfig(lambda_v=0, lambda_flow=0)
    m = compute_mismatch(state, cond, ybus14, case14).as_array()
    assert ttt_loss(state, cond, case14, ybus14, cfg)[0] == pytest.approx(m @ m, rel=1e-14)


def test_components_sum_to_total(case14, rng):
    case = _rated(case14)
    Y = build_ybus(case)
    cond = nominal_condition(case)
    state = _perturbed_state(case, cond, rng)
    total, parts = ttt_loss(state, cond, case, Y, TTTConfig(include_gen_limits=True))
    assert parts.voltage > 0 and parts.flow > 0 and parts.gen > 0
    assert abs(parts.mismatch_p + parts.mismatch_q + parts.voltage + parts.flow + parts.gen - total) <= 1e-12


def test_loss_dimension_check(case14, case2, ybus14):
    cond = nominal_condition(case14)
    bad = newton_raphson(case2, nominal_condition(case2)).state
    with pytest.raises(DimensionError):
        ttt_loss(bad, cond, case14, ybus14, TTTConfig())
    with pytest.raises(DimensionError):
        grad_ttt_wrt_state(bad, cond, case14, ybus14, TTTConfig())


# ---------------------------------------------------------------- gradient

def test_gradient_fd_case14(case14, ybus14):
    cond = nominal_condition(case14)
    cfg = TTTConfig()
    for seed in range(20):
        state = _perturbed_state(case14, cond, np.random.default_rng(seed))
        g = grad_ttt_wrt_state(state, cond, case14, ybus14, cfg)
        assert _rel(g, _fd_grad(case14, cond, ybus14, cfg, state)) < 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_gradient_fd_flow_and_generator_terms(case14, seed):
    case = _rated(case14)
    Y = build_ybus(case)
    cond = nominal_condition(case)
    cfg = TTTConfig(lambda_v=3.0, lambda_flow=2.0, include_gen_limits=True, lambda_gen=5.0)
    state = _perturbed_state(case, cond, np.random.default_rng(seed))
    _, parts = ttt_loss(state, cond, case, Y, cfg)
    assert parts.flow > 0 and parts.gen > 0
    g = grad_ttt_wrt_state(state, cond, case, Y, cfg)
    assert _rel(g, _fd_grad(case, cond, Y, cfg, state)) < 1e-5


def test_gradient_vanishes_at_interior_solution(case14):
    case = _widened(case14)
    Y = build_ybus(case)
    cond = nominal_condition(case)
    state = newton_raphson(case, cond, tol=1e-10).state
    assert np.linalg.norm(grad_ttt_wrt_state(state, cond, case, Y, TTTConfig())) <= 1e-6


def test_gradient_without_penalties_is_jacobian_product(case118, rng):
    Y = build_ybus(case118)
    cond = nominal_condition(case118)
    state = _perturbed_state(case118, cond, rng, spread=0.02)
    m = compute_mismatch(state, cond, Y, case118).as_array()
    J = compute_jacobian(state, Y, case118)
    g = grad_ttt_wrt_state(state, cond, case118, Y, TTTConfig(lambda_v=0, lambda_flow=0))
    # J here differentiates specified minus calculated, so the injection-Jacobian form -2 J_inj^T m becomes 2 J^T m
    assert np.allclose(g, 2 * J.T @ m, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- projection

def test_project_phi_examples():
    phi = np.array([0.3, 0.4])
    assert np.array_equal(project_phi(phi, 1.0), phi)
    out = project_phi(np.array([1.2, 1.6]), 1.0)
    assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(out, [0.6, 0.8])
    assert not np.any(project_phi(np.zeros(3), 1.0))
    with pytest.raises(ValueError):
        project_phi(phi, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=10), st.floats(1e-3, 1e3))
def test_project_phi_property(values, eps):
    out = project_phi(np.array(values), eps)
    assert np.linalg.norm(out) <= eps * (1 + 1e-12)
    assert np.array_equal(project_phi(out, eps), out) or np.allclose(project_phi(out, eps), out, rtol=1e-15)


def test_config_validation():
    for bad in (dict(steps=-1), dict(eta=0), dict(lambda_v=-1), dict(epsilon=0.0),
                dict(step_control="armijo"), dict(metric="hessian")):
        with pytest.raises(ValueError):
            TTTConfig(**bad)


# ---------------------------------------------------------------- refine

@pytest.fixture(scope="module")
def tests14(small14):
    records, params = small14
    return [r for r in records if r.split == "test"], params


def test_zero_steps_is_identity(case14, ybus14, tests14):
    recs, params = tests14
    cond = recs[0].condition
    res = refine(params, cond, case14, ybus14, TTTConfig(steps=0))
    u0 = forward(params, encode_input(cond, case14, input_stats(params)))[0]
    assert res.state == full_state(case14, cond, u0) and res.trace == []
    assert not np.any(res.adapt.phi)


@pytest.mark.parametrize("metric", ["nominal-jacobian", "euclidean"])
def test_backtracking_monotone_and_in_ball(case14, ybus14, tests14, metric):
    recs, params = tests14
    cfg = TTTConfig(metric=metric, eta=1.0 if metric != "euclidean" else 5.0, epsilon_rel=0.02)
    eps = cfg.radius(params)
    for r in recs[:10]:
        res = refine(params, r.condition, case14, ybus14, cfg)
        losses = [res.adapt.initial.loss] + [t.loss for t in res.trace]
        assert all(b <= a for a, b in zip(losses, losses[1:]))
        assert all(t.phi_norm <= eps * (1 + 1e-12) for t in res.trace)
        assert np.linalg.norm(res.adapt.phi) <= eps * (1 + 1e-12)
        assert len(res.trace) == cfg.steps


def test_refine_reduces_mismatch(case14, ybus14, tests14):
    recs, params = tests14
    ratios = []
    for r in recs[:10]:
        res = refine(params, r.condition, case14, ybus14)
        before = compute_mismatch(res.initial_state, r.condition, ybus14, case14).as_array()
        after = compute_mismatch(res.state, r.condition, ybus14, case14).as_array()
        ratios.append((after @ after) / (before @ before))
    assert np.median(ratios) <= 1 / 25


def test_frozen_parameters_untouched_and_stateless(case14, ybus14, tests14):
    recs, params = tests14
    snapshot = copy.deepcopy(params)
    a, b = recs[0].condition, recs[1].condition
    refine(params, a, case14, ybus14)
    after_a = refine(params, b, case14, ybus14)
    alone = refine(params, b, case14, ybus14)
    for x, y in zip(params.weights + params.biases, snapshot.weights + snapshot.biases):
        assert np.array_equal(x, y)
    assert after_a.state == alone.state
    assert [t.loss for t in after_a.trace] == [t.loss for t in alone.trace]


def _small_model(case, rng, hidden=(7, 5)):
    p = init_params(6 * case.n, case.n_unknowns, hidden, rng)
    cond = nominal_condition(case)
    p.output_mean = extract_unknowns(case, newton_raphson(case, cond).state)
    p.output_scale = np.full(case.n_unknowns, 0.01)
    return p


@pytest.mark.parametrize("seed", range(3))
def test_chain_rule_over_phi(case14, ybus14, seed):
    rng = np.random.default_rng(seed)
    params = _small_model(case14, rng)
    cond = nominal_condition(case14)
    x = encode_input(cond, case14, input_stats(params)) + rng.normal(size=params.input_dim)
    cfg = TTTConfig()
    phi = 0.1 * rng.normal(size=params.n_adapt)

    def loss(ph):
        return ttt_loss(full_state(case14, cond, forward(params, x, ph)[0]), cond, case14, ybus14, cfg)[0]

    u, cache = forward(params, x, phi)
    g_u = grad_ttt_wrt_state(full_state(case14, cond, u), cond, case14, ybus14, cfg)
    g_phi = backward_output_to_adapt(params, cache, g_u)
    h = 1e-6
    for k in rng.choice(params.n_adapt, 20, replace=False):
        e = np.zeros(params.n_adapt)
        e[k] = h
        assert g_phi[k] == pytest.approx((loss(phi + e) - loss(phi - e)) / (2 * h), rel=1e-5, abs=1e-10)


def _literal_refine(params, cond, case, ybus, cfg):
    """Reference loop over the full phi vector, fixed Euclidean steps."""
    x = encode_input(cond, case, input_stats(params))
    eps = cfg.radius(params)
    phi = np.zeros(params.n_adapt)
    for _ in range(cfg.steps):
        u, cache = forward(params, x, phi)
        g_u = grad_ttt_wrt_state(full_state(case, cond, u), cond, case, ybus, cfg)
        phi = project_phi(phi - cfg.eta * backward_output_to_adapt(params, cache, g_u), eps)
    return full_state(case, cond, forward(params, x, phi)[0]), phi


@pytest.mark.parametrize("eps_rel", [0.1, 1e-3])
def test_reparametrized_loop_matches_literal_update(case14, ybus14, tests14, eps_rel):
    recs, params = tests14
    cfg = TTTConfig(step_control="fixed", metric="euclidean", eta=1e-2, epsilon_rel=eps_rel)
    for r in recs[:3]:
        ref_state, ref_phi = _literal_refine(params, r.condition, case14, ybus14, cfg)
        res = refine(params, r.condition, case14, ybus14, cfg)
        assert np.allclose(res.adapt.phi, ref_phi, rtol=1e-9, atol=1e-13)
        assert np.allclose(res.state.v, ref_state.v, atol=1e-12)
        assert np.allclose(res.state.theta, ref_state.theta, atol=1e-12)


def test_feasible_point_is_fixed(case14):
    case = _widened(case14)
    Y = build_ybus(case)
    cond = nominal_condition(case)
    target = extract_unknowns(case, newton_raphson(case, cond, tol=1e-12).state)
    params = init_params(6 * case.n, case.n_unknowns, (8, 8), np.random.default_rng(0))
    params.weights[-1][:] = 0.0
    params.output_mean = target
    res = refine(params, cond, case, Y)
    assert res.adapt.initial.loss <= 1e-20
    assert res.trace[-1].loss <= res.adapt.initial.loss
    delta = extract_unknowns(case, res.state) - target
    assert np.max(np.abs(delta)) <= 1e-6


def test_non_finite_input_aborts(case14, ybus14, tests14):
    recs, params = tests14
    c = recs[0].condition
    bad = OperatingCondition(np.where(np.arange(case14.n) == 3, np.nan, c.p_spec), c.q_spec, c.v_set)
    res = refine(params, bad, case14, ybus14)
    assert res.aborted and "non-finite" in res.diagnostic
    assert res.state is res.initial_state
    assert not np.any(res.adapt.phi)


def test_paper_faithful_profile(case14, ybus14, tests14):
    recs, params = tests14
    cfg = PROFILES["paper-faithful"]
    assert (cfg.step_control, cfg.metric, cfg.eta, cfg.lambda_v, cfg.lambda_flow) == \
        ("fixed", "euclidean", 1e-2, 100.0, 100.0)
    res = refine(params, recs[0].condition, case14, ybus14, cfg)
    assert len(res.trace) == 10 and all(t.step_size == 1e-2 for t in res.trace)


def test_batch_parallel_identical(case14, ybus14, tests14):
    recs, params = tests14
    conds = [r.condition for r in recs[:6]]
    serial = refine_batch(params, conds, case14, ybus14, jobs=1)
    parallel = refine_batch(params, conds, case14, ybus14, jobs=2)
    for a, b in zip(serial, parallel):
        assert a.state == b.state and np.array_equal(a.adapt.phi, b.adapt.phi)


def test_params_type_guard(case118, ybus14, tests14):
    recs, params = tests14
    assert isinstance(params, SurrogateParams)
    with pytest.raises(DimensionError):
        refine(params, nominal_condition(case118), case118, build_ybus(case118))
