"""Physics-informed test-time refinement of the surrogate's final layer.

For one test condition the final affine layer is perturbed by ``phi``
(initially zero) and ``phi`` is moved by gradient steps on

    ||dP||^2 + ||dQ||^2 + lambda_v * sum volt_penalty + lambda_flow * sum flow_penalty

while being kept inside the l2 ball ``||phi|| <= epsilon`` by radial projection.
Frozen layers are never touched and ``phi`` is discarded after each sample.

Two step metrics are available. ``euclidean`` is the plain update
``phi -= eta * grad``. ``nominal-jacobian`` preconditions the gradient with a
fixed, per-case matrix built once from the power-flow Jacobian ``J0`` at the
nominal operating point: the unknown-space gradient ``g`` is mapped to
``w = S^-2 (J0^T J0)^-1 g / (2 (1 + |h|^2))`` and then pulled back through the
final layer, so an ``eta = 1`` step moves the unknowns by the Gauss-Newton
step of the nominal linearization. No per-sample curvature is formed.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np
import scipy.sparse.linalg as spla

from .errors import DimensionError, SingularJacobianError
from .grid import GridCase, StateVector, build_ybus, flat_state, full_state, nominal_condition
from .pf import _injection_jacobian, branch_flow_derivatives, branch_flows, injection_vjp, newton_raphson
from .surrogate import SurrogateParams, encode_input, forward, input_stats

STEP_CONTROLS = ("fixed", "backtracking")
METRICS = ("nominal-jacobian", "euclidean")


@dataclass(frozen=True)
class TTTConfig:
    steps: int = 10
    eta: float = 1.0
    lambda_v: float = 1.0
    lambda_flow: float = 1.0
    epsilon: Optional[float] = None  # absolute radius; None -> epsilon_rel * ||theta_adapt||
    epsilon_rel: float = 0.1
    step_control: str = "backtracking"
    metric: str = "nominal-jacobian"
    max_halvings: int = 8
    include_gen_limits: bool = False
    lambda_gen: float = 1.0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.lambda_v < 0 or self.lambda_flow < 0 or self.lambda_gen < 0:
            raise ValueError("penalty weights must be >= 0")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not self.epsilon_rel > 0:
            raise ValueError("epsilon_rel must be > 0")
        if self.step_control not in STEP_CONTROLS:
            raise ValueError(f"step_control must be one of {STEP_CONTROLS}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")

    def radius(self, params: SurrogateParams) -> float:
        if self.epsilon is not None:
            return self.epsilon
        W, b = params.weights[-1], params.biases[-1]
        return self.epsilon_rel * float(np.sqrt(np.vdot(W, W) + b @ b))


PROFILES = {
    "default": TTTConfig(),
    # literal phi <- phi - eta * grad with a fixed step
    "paper-faithful": TTTConfig(step_control="fixed", metric="euclidean", eta=1e-2, lambda_v=100.0,
                                 lambda_flow=100.0, lambda_gen=100.0),
}


# ---------------------------------------------------------------- penalties

def penalty_volt(v, v_min, v_max) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.sum(np.maximum(v - v_max, 0.0) ** 2 + np.maximum(v_min - v, 0.0) ** 2))


def penalty_flow(s_mag, rating) -> float:
    """Squared excess over the rating; a missing (None/NaN) rating means unlimited."""
    if rating is None:
        return 0.0
    s_mag = np.asarray(s_mag, dtype=float)
    rating = np.asarray(rating, dtype=float)
    excess = np.where(np.isnan(rating), 0.0, np.maximum(s_mag - np.nan_to_num(rating, nan=np.inf), 0.0))
    return float(np.sum(excess ** 2))


def _interval_excess(x, lo, hi):
    return np.maximum(x - hi, 0.0) - np.maximum(lo - x, 0.0)


@dataclass(frozen=True)
class LossBreakdown:
    mismatch_p: float
    mismatch_q: float
    voltage: float
    flow: float
    gen: float = 0.0

    @property
    def total(self):
        return self.mismatch_p + self.mismatch_q + self.voltage + self.flow + self.gen


def _check_dims(state, condition, case):
    if state.n != case.n or condition.n != case.n:
        raise DimensionError(f"state/condition sizes {state.n}/{condition.n} do not match case ({case.n})")


class _Point(NamedTuple):
    """Quantities shared by the loss and its gradient at one state."""
    V: np.ndarray
    I: np.ndarray
    p: np.ndarray
    q: np.ndarray


def _point(state, ybus) -> _Point:
    V = state.complex
    I = ybus @ V
    S = V * np.conj(I)
    return _Point(V, I, S.real, S.imag)


def _gen_terms(pt: _Point, condition, case):
    gb = case.gen_buses
    agg = case.gen_aggregate
    s = case.slack_index
    slack_row = int(np.searchsorted(gb, s))
    q_ex = _interval_excess(pt.q[gb] - condition.q_spec[gb], agg[:, 0], agg[:, 1])
    p_ex = _interval_excess(pt.p[s] - condition.p_spec[s], agg[slack_row, 2], agg[slack_row, 3])
    return q_ex, float(p_ex)


def _loss_at(state, condition, case, config, pt: _Point):
    dp = condition.p_spec[case.non_slack] - pt.p[case.non_slack]
    dq = condition.q_spec[case.pq] - pt.q[case.pq]
    volt = config.lambda_v * penalty_volt(state.v, case.v_min, case.v_max) if config.lambda_v else 0.0
    flow = 0.0
    if config.lambda_flow and np.any(~np.isnan(case.ratings)):
        flow = config.lambda_flow * penalty_flow(branch_flows(state, case).s_mag, case.ratings)
    gen = 0.0
    if config.include_gen_limits:
        q_ex, p_ex = _gen_terms(pt, condition, case)
        gen = config.lambda_gen * (float(q_ex @ q_ex) + p_ex ** 2)
    return LossBreakdown(mismatch_p=float(dp @ dp), mismatch_q=float(dq @ dq), voltage=volt, flow=flow, gen=gen)


def ttt_loss(state: StateVector, condition, case: GridCase, ybus, config: TTTConfig):
    """Composite refinement loss and its per-term breakdown (weighted terms)."""
    _check_dims(state, condition, case)
    parts = _loss_at(state, condition, case, config, _point(state, ybus))
    return parts.total, parts


def _grad_at(state, condition, case, ybus, config, pt: _Point):
    # the squared mismatch and the optional generator terms are both linear
    # functionals of (P_calc, Q_calc), so one adjoint product covers them
    ns, pq = case.non_slack, case.pq
    wp = np.zeros(case.n)
    wq = np.zeros(case.n)
    wp[ns] = -2.0 * (condition.p_spec[ns] - pt.p[ns])
    wq[pq] = -2.0 * (condition.q_spec[pq] - pt.q[pq])
    if config.include_gen_limits:
        q_ex, p_ex = _gen_terms(pt, condition, case)
        wq[case.gen_buses] += 2.0 * config.lambda_gen * q_ex
        wp[case.slack_index] += 2.0 * config.lambda_gen * p_ex
    grad = injection_vjp(state, ybus, case, wp, wq, currents=(pt.V, pt.I))
    theta_col, v_col = case.unknown_columns

    if config.lambda_v:
        ex = _interval_excess(state.v[pq], case.v_min[pq], case.v_max[pq])
        grad[v_col[pq]] += 2.0 * config.lambda_v * ex

    rated = np.flatnonzero(~np.isnan(case.ratings))
    if config.lambda_flow and rated.size:
        flows = branch_flows(state, case)
        af, at = np.abs(flows.s_from[rated]), np.abs(flows.s_to[rated])
        use_from = af >= at
        s_mag = np.where(use_from, af, at)
        excess = np.maximum(s_mag - case.ratings[rated], 0.0)
        hot = excess > 0
        if np.any(hot):
            dSf, dSt = branch_flow_derivatives(state, case)
            S = np.where(use_from, flows.s_from[rated], flows.s_to[rated])[hot]
            dS = np.where(use_from[:, None], dSf[rated], dSt[rated])[hot]
            dmag = (np.conj(S)[:, None] * dS).real / np.abs(S)[:, None]
            coef = (2.0 * config.lambda_flow * excess[hot])[:, None] * dmag
            f, t = case.branch_admittances[:2]
            fb, tb = f[rated][hot], t[rated][hot]
            for j, (buses, cols) in enumerate(((fb, theta_col), (tb, theta_col), (fb, v_col), (tb, v_col))):
                c = cols[buses]
                keep = c >= 0
                np.add.at(grad, c[keep], coef[keep, j])
    return grad


def grad_ttt_wrt_state(state: StateVector, condition, case: GridCase, ybus, config: TTTConfig) -> np.ndarray:
    """Analytic gradient of :func:`ttt_loss` over the unknown vector."""
    _check_dims(state, condition, case)
    return _grad_at(state, condition, case, ybus, config, _point(state, ybus))


# ---------------------------------------------------------------- step metric

class NominalMetric:
    """Applies ``(J0^T J0)^-1 / 2`` with ``J0`` factorized once at the nominal solution.

    Falls back to the flat-start Jacobian when the nominal power flow does not
    converge.
    """

    def __init__(self, case: GridCase, ybus=None):
        ybus = build_ybus(case) if ybus is None else ybus
        cond = nominal_condition(case)
        try:
            res = newton_raphson(case, cond, ybus=ybus)
            state = res.state if res.converged else flat_state(case, cond)
        except SingularJacobianError:
            state = flat_state(case, cond)
        try:
            self._lu = spla.splu(_injection_jacobian(state, ybus, case).tocsc())
        except RuntimeError:
            raise SingularJacobianError(0) from None
        self.n = case.n_unknowns
        # a dense matvec beats two sparse triangular solves on small grids
        self._dense = None
        if self.n <= self.DENSE_LIMIT:
            self._dense = 0.5 * self._lu.solve(self._lu.solve(np.eye(self.n), trans="T"))

    DENSE_LIMIT = 1500

    def apply(self, g):
        # the sign of J0 cancels in J0^T J0
        g = np.asarray(g, dtype=float)
        if self._dense is not None:
            return self._dense @ g
        return 0.5 * self._lu.solve(self._lu.solve(g, trans="T"))


_METRIC_CACHE: "dict[int, tuple[GridCase, NominalMetric]]" = {}


def nominal_metric(case: GridCase, ybus=None) -> NominalMetric:
    """Per-case metric, cached for the lifetime of ``case``."""
    hit = _METRIC_CACHE.get(id(case))
    if hit is not None and hit[0] is case:
        return hit[1]
    metric = NominalMetric(case, ybus)
    if len(_METRIC_CACHE) >= 8:
        _METRIC_CACHE.pop(next(iter(_METRIC_CACHE)))
    _METRIC_CACHE[id(case)] = (case, metric)
    return metric


# ---------------------------------------------------------------- refinement

def project_phi(phi, epsilon: float):
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    phi = np.asarray(phi, dtype=float)
    return _shrink_to(phi, epsilon, lambda x: float(np.linalg.norm(x)))


def _shrink_to(x, epsilon, norm_of):
    norm = norm_of(x)
    if norm <= epsilon:
        return x
    x = x * (epsilon / norm)
    # rounding can leave the norm an ulp above epsilon
    while norm_of(x) > epsilon:
        x = x * (1.0 - 2.0 ** -52)
    return x


@dataclass(frozen=True)
class TraceEntry:
    loss: float
    mismatch_p: float  # ||dP||^2
    mismatch_q: float
    voltage: float
    flow: float
    gen: float
    phi_norm: float
    step_size: float


@dataclass
class AdaptState:
    """Per-sample adaptation. ``phi = [outer(coef, hidden).ravel(), coef]``, built on demand."""
    coef: np.ndarray
    hidden: np.ndarray
    epsilon: float
    initial: Optional[TraceEntry] = None
    trace: List[TraceEntry] = field(default_factory=list)

    @property
    def phi(self) -> np.ndarray:
        if not np.any(self.coef):
            # exact zero even when h is non-finite
            return np.zeros(self.coef.size * (self.hidden.size + 1))
        return np.concatenate([np.outer(self.coef, self.hidden).ravel(), self.coef])

    @property
    def phi_norm(self) -> float:
        if not np.any(self.coef):
            return 0.0
        return float(np.linalg.norm(self.coef) * np.sqrt(1.0 + self.hidden @ self.hidden))


@dataclass
class RefineResult:
    state: StateVector
    initial_state: StateVector
    adapt: AdaptState
    aborted: bool = False
    diagnostic: str = ""

    @property
    def trace(self):
        return self.adapt.trace


def _entry(parts: LossBreakdown, phi_norm, step):
    return TraceEntry(parts.total, parts.mismatch_p, parts.mismatch_q, parts.voltage, parts.flow, parts.gen,
                      phi_norm, step)


def refine(params: SurrogateParams, condition, case: GridCase, ybus, config: TTTConfig = TTTConfig(),
           features=None, metric: Optional[NominalMetric] = None) -> RefineResult:
    """Refine one prediction; returns the adapted state and the per-step trace.

    ``metric`` overrides the cached per-case preconditioner when
    ``config.metric == "nominal-jacobian"``.

    With the hidden activation ``h`` fixed, every adapt-space gradient is
    ``[outer(w, h), w]`` (see :func:`backward_output_to_adapt`), so ``phi``
    stays of the form ``[outer(a, h), a]``. The loop therefore updates the
    output-sized coefficient ``a`` with ``||phi|| = ||a|| sqrt(1 + |h|^2)``
    and ``dW h + db = a (1 + |h|^2)``, and materializes ``phi`` once at the
    end. This is an exact reparametrization, not an approximation.
    """
    params.check_case(case)
    if features is None:
        features = encode_input(condition, case, input_stats(params))
    u0, cache = forward(params, features)
    h = cache.activations[-1]
    if config.steps == 0:
        state0 = full_state(case, condition, u0)
        return RefineResult(state0, state0, AdaptState(np.zeros_like(u0), h, config.radius(params)))
    if config.metric == "nominal-jacobian" and metric is None:
        metric = nominal_metric(case, ybus)
    scale = params.output_scale
    hh = 1.0 + float(h @ h)
    root = np.sqrt(hh)
    eps = config.radius(params)

    def evaluate(a):
        state = full_state(case, condition, u0 + scale * (a * hh))
        pt = _point(state, ybus)
        parts = _loss_at(state, condition, case, config, pt)
        return state, pt, parts.total, parts

    def norm_of(a):
        return float(np.linalg.norm(a)) * root

    def project(a):
        return _shrink_to(a, eps, norm_of)

    def result(a, state, state0, adapt, **kw):
        adapt.coef = a
        return RefineResult(state, state0, adapt, **kw)

    a = np.zeros(params.output_dim)
    state0, pt, loss, parts = evaluate(a)
    adapt = AdaptState(coef=a, hidden=h, epsilon=eps, initial=_entry(parts, 0.0, 0.0))
    if not np.isfinite(loss):
        return result(a, state0, state0, adapt, aborted=True, diagnostic="non-finite initial loss")

    state = state0
    for k in range(config.steps):
        g_u = _grad_at(state, condition, case, ybus, config, pt)
        if config.metric == "euclidean":
            w = g_u * scale
        else:
            w = metric.apply(g_u) / (scale * hh)
        if not np.all(np.isfinite(w)):
            return result(np.zeros_like(a), state0, state0, adapt, aborted=True,
                          diagnostic=f"non-finite gradient at step {k}")
        t = config.eta
        if config.step_control == "fixed":
            a_new = project(a - t * w)
            trial = evaluate(a_new)
            if not np.isfinite(trial[2]):
                return result(np.zeros_like(a), state0, state0, adapt, aborted=True,
                              diagnostic=f"non-finite loss at step {k}")
        else:
            for _ in range(config.max_halvings + 1):
                a_new = project(a - t * w)
                trial = evaluate(a_new)
                if np.isfinite(trial[2]) and trial[2] <= loss:
                    break
                t *= 0.5
            else:
                t = 0.0
                a_new, trial = a, (state, pt, loss, parts)
        a = a_new
        state, pt, loss, parts = trial
        adapt.trace.append(_entry(parts, norm_of(a), t))
    return result(a, state, state0, adapt)


def refine_batch(params, conditions, case, ybus, config=TTTConfig(), jobs: int = 1):
    """Refine many samples independently; result order follows ``conditions``."""
    if jobs > 1 and len(conditions) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_refine_one, [(params, c, case, ybus, config) for c in conditions],
                                 chunksize=max(1, len(conditions) // (4 * jobs))))
    return [refine(params, c, case, ybus, config) for c in conditions]


def _refine_one(args):
    return refine(*args)
