"""AC power-flow physics: injections, mismatches, Jacobian, Newton-Raphson,
branch flows and generator output recovery.

Injections are evaluated as ``S = V * conj(Y @ V)`` with ``Y`` in CSR form
with sorted column indices, so each bus sum runs over the stored entries of its
row in ascending column order. That fixed order makes every routine here
bitwise deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionError, SingularJacobianError
from .grid import (GridCase, OperatingCondition, StateVector, build_ybus, extract_unknowns,
                   flat_state, full_state)

DENSE_LU_BELOW = 50


@dataclass(frozen=True)
class MismatchVector:
    dp: np.ndarray  # non-slack buses, ascending
    dq: np.ndarray  # PQ buses, ascending

    def as_array(self):
        return np.concatenate([self.dp, self.dq])

    def max_abs(self):
        a = self.as_array()
        return float(np.max(np.abs(a))) if a.size else 0.0


@dataclass(frozen=True)
class BranchFlows:
    s_from: np.ndarray
    s_to: np.ndarray

    @property
    def s_mag(self):
        return np.maximum(np.abs(self.s_from), np.abs(self.s_to))


class NRResult(NamedTuple):
    state: StateVector
    iterations: int
    converged: bool
    residuals: list  # max-abs mismatch before each Jacobian solve, plus the final one


def _check(state: StateVector, n: int):
    if state.n != n or len(state.theta) != n:
        raise DimensionError(f"state has {state.n} buses, expected {n}")


def compute_injections(state: StateVector, ybus):
    _check(state, ybus.shape[0])
    V = state.complex
    S = V * np.conj(ybus @ V)
    return S.real, S.imag


def compute_mismatch(state, condition: OperatingCondition, ybus, case: GridCase) -> MismatchVector:
    if condition.n != case.n:
        raise DimensionError(f"condition has {condition.n} buses, case has {case.n}")
    p, q = compute_injections(state, ybus)
    return MismatchVector(dp=condition.p_spec[case.non_slack] - p[case.non_slack],
                          dq=condition.q_spec[case.pq] - q[case.pq])


def _jacobian_entries(state, ybus, case):
    """Row, column and value arrays of the injection Jacobian, read off Y's CSR pattern.

    Per stored entry (i, j) of Y:
    dS_i/dtheta_j = -j V_i conj(Y_ij V_j) (+ j V_i conj(I_i) on the diagonal),
    dS_i/d|V_j|   = V_i conj(Y_ij e_j)    (+ conj(I_i) e_i on the diagonal), e = V/|V|.
    Every bus has a stored diagonal entry (build_ybus always writes the shunt).
    """
    _check(state, case.n)
    V = state.complex
    I = ybus @ V
    Vn = V / np.abs(V)
    rows = np.repeat(np.arange(case.n), np.diff(ybus.indptr))
    cols = ybus.indices
    Vr = V[rows]
    dVa = -1j * Vr * np.conj(ybus.data * V[cols])
    dVm = Vr * np.conj(ybus.data * Vn[cols])
    diag = rows == cols
    d = rows[diag]
    dVa[diag] += 1j * V[d] * np.conj(I[d])
    dVm[diag] += np.conj(I[d]) * Vn[d]

    n_ns = len(case.non_slack)
    prow = np.full(case.n, -1)
    prow[case.non_slack] = np.arange(n_ns)
    qrow = np.full(case.n, -1)
    qrow[case.pq] = n_ns + np.arange(len(case.pq))
    tcol, vcol = prow, qrow  # same index maps: unknowns mirror the mismatch ordering
    out_r, out_c, out_v = [], [], []
    for rmap, part in ((prow, np.real), (qrow, np.imag)):
        rr = rmap[rows]
        for cmap, vals in ((tcol, dVa), (vcol, dVm)):
            cc = cmap[cols]
            keep = (rr >= 0) & (cc >= 0)
            out_r.append(rr[keep])
            out_c.append(cc[keep])
            out_v.append(part(vals[keep]))
    return np.concatenate(out_r), np.concatenate(out_c), np.concatenate(out_v)


def _injection_jacobian(state, ybus, case, dense=False):
    r, c, v = _jacobian_entries(state, ybus, case)
    m = case.n_unknowns
    if dense:
        J = np.zeros((m, m))
        J[r, c] = v
        return J
    J = sp.csr_matrix((v, (r, c)), shape=(m, m))
    J.sort_indices()
    return J


def compute_jacobian(state, ybus, case) -> sp.csr_matrix:
    """Jacobian of the mismatch vector w.r.t. the unknown vector.

    Sign follows the mismatch (specified minus calculated), i.e. the negated injection
    Jacobian. Rows: dP at non-slack buses then dQ at PQ buses; columns follow the
    unknown ordering.
    """
    return -_injection_jacobian(state, ybus, case)


_TRANSPOSES: dict = {}


def _transposed(ybus):
    """``ybus.T`` as CSR, cached per matrix object (adjoint products are hot)."""
    hit = _TRANSPOSES.get(id(ybus))
    if hit is not None and hit[0] is ybus:
        return hit[1]
    yt = ybus.T.tocsr()
    if len(_TRANSPOSES) >= 8:
        _TRANSPOSES.pop(next(iter(_TRANSPOSES)))
    _TRANSPOSES[id(ybus)] = (ybus, yt)
    return yt


def injection_vjp(state, ybus, case, wp, wq, currents=None) -> np.ndarray:
    """Gradient over the unknown vector of ``sum(wp * P_calc + wq * Q_calc)``.

    Computed without forming the Jacobian, via
    ``wp^T Re(dS/dx) + wq^T Im(dS/dx) = Re(conj(c)^T dS/dx)`` with ``c = wp + j wq``.
    ``currents`` may pass a precomputed ``(V, Y @ V)`` pair.
    """
    cb = np.asarray(wp, dtype=float) - 1j * np.asarray(wq, dtype=float)
    if cb.shape != (case.n,):
        raise DimensionError(f"bus weights have shape {cb.shape}, expected ({case.n},)")
    if currents is None:
        V = state.complex
        I = ybus @ V
    else:
        V, I = currents
    Vn = V / np.abs(V)
    yt = _transposed(ybus) if sp.issparse(ybus) else np.transpose(ybus)
    r = (yt @ np.conj(cb * V)).conj()  # conj(Y^T conj(c V)), shared by both blocks
    # dS/dVa = j diag(V) (diag(conj I) - conj(Y) diag(conj V))
    g_va = 1j * cb * V * np.conj(I) - 1j * r * np.conj(V)
    # dS/dVm = diag(V) conj(Y) diag(conj Vn) + diag(conj I) diag(Vn)
    g_vm = r * np.conj(Vn) + cb * np.conj(I) * Vn
    return np.concatenate([g_va.real[case.non_slack], g_vm.real[case.pq]])


def mismatch_vjp(state, ybus, case, weights, currents=None) -> np.ndarray:
    """``J^T @ weights`` for the mismatch Jacobian, without forming J."""
    weights = np.asarray(weights, dtype=float)
    ns, pq = case.non_slack, case.pq
    if weights.shape != (len(ns) + len(pq),):
        raise DimensionError(f"weights have shape {weights.shape}, expected ({len(ns) + len(pq)},)")
    wp = np.zeros(case.n)
    wq = np.zeros(case.n)
    wp[ns] = weights[:len(ns)]
    wq[pq] = weights[len(ns):]
    return -injection_vjp(state, ybus, case, wp, wq, currents)


def _solve(J, rhs, iteration):
    if isinstance(J, np.ndarray):
        try:
            lu, piv = scipy.linalg.lu_factor(J, check_finite=True)
        except (ValueError, np.linalg.LinAlgError):
            raise SingularJacobianError(iteration) from None
        if np.any(np.diag(lu) == 0):
            raise SingularJacobianError(iteration)
        return scipy.linalg.lu_solve((lu, piv), rhs)
    try:
        lu = spla.splu(J.tocsc())
    except RuntimeError:
        raise SingularJacobianError(iteration) from None
    return lu.solve(rhs)


def newton_raphson(case: GridCase, condition: OperatingCondition, init=None, tol: float = 1e-8,
                   max_iter: int = 20, ybus=None) -> NRResult:
    """Polar Newton-Raphson with a full Jacobian refactorization per iteration.

    ``init`` is an unknown vector (or None for a flat start). Divergence or
    non-finite iterates return ``converged=False`` with the last finite state.
    """
    if not tol > 0 or max_iter < 1:
        raise ValueError("need tol > 0 and max_iter >= 1")
    if ybus is None:
        ybus = build_ybus(case)
    x = extract_unknowns(case, flat_state(case, condition)) if init is None else np.array(init, dtype=float)
    state = full_state(case, condition, x)
    residuals = []
    it = 0
    last_good = state
    while True:
        m = compute_mismatch(state, condition, ybus, case).as_array()
        norm = float(np.max(np.abs(m))) if m.size else 0.0
        residuals.append(norm)
        if not np.isfinite(norm):
            return NRResult(last_good, it, False, residuals)
        if norm <= tol:
            return NRResult(state, it, True, residuals)
        if it >= max_iter:
            return NRResult(state, it, False, residuals)
        last_good = state
        with np.errstate(all="ignore"):
            dx = _solve(_injection_jacobian(state, ybus, case, dense=case.n < DENSE_LU_BELOW), m, it)
        it += 1
        if not np.all(np.isfinite(dx)):
            return NRResult(state, it, False, residuals)
        x = x + dx
        if np.any(x[len(case.non_slack):] <= 0):
            return NRResult(state, it, False, residuals)
        state = full_state(case, condition, x)


def branch_flows(state: StateVector, case: GridCase) -> BranchFlows:
    _check(state, case.n)
    f, t, yff, yft, ytf, ytt = case.branch_admittances
    V = state.complex
    Vf, Vt = V[f], V[t]
    s_from = Vf * np.conj(yff * Vf + yft * Vt)
    s_to = Vt * np.conj(ytf * Vf + ytt * Vt)
    return BranchFlows(s_from=s_from, s_to=s_to)


def branch_flow_derivatives(state: StateVector, case: GridCase):
    """Per-branch derivatives of the end flows w.r.t. the four terminal variables.

    Returns ``(dSf, dSt)``, each complex of shape (n_branch, 4) with columns
    (theta_from, theta_to, v_from, v_to).
    """
    f, t, yff, yft, ytf, ytt = case.branch_admittances
    V = state.complex
    Vf, Vt = V[f], V[t]
    ef, et = Vf / np.abs(Vf), Vt / np.abs(Vt)
    cross_f = Vf * np.conj(yft * Vt)   # theta-dependent part of s_from
    cross_t = Vt * np.conj(ytf * Vf)
    dSf = np.column_stack([1j * cross_f, -1j * cross_f,
                           2 * np.abs(Vf) * np.conj(yff) + ef * np.conj(yft * Vt),
                           Vf * np.conj(yft * et)])
    dSt = np.column_stack([-1j * cross_t, 1j * cross_t,
                           Vt * np.conj(ytf * ef),
                           2 * np.abs(Vt) * np.conj(ytt) + et * np.conj(ytf * Vf)])
    return dSf, dSt


def recover_generation(state, case, condition, ybus=None):
    """Aggregate reactive output per generator bus (``case.gen_buses`` order) and slack active output."""
    if ybus is None:
        ybus = build_ybus(case)
    p, q = compute_injections(state, ybus)
    gb = case.gen_buses
    q_g = q[gb] - condition.q_spec[gb]
    s = case.slack_index
    return q_g, float(p[s] - condition.p_spec[s])
