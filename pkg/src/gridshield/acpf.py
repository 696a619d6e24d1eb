"""AC power flow: injection and flow equations, Newton-Raphson, measurement model."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .caseio import GridCase
from .errors import NonConvergence, SingularJacobian
from .grid import Admittance, admittance_of

log = logging.getLogger(__name__)

PF_TOL = 1e-8
PF_MAX_ITER = 30
NOISE_REL = 0.01
SIGMA_FLOOR = 1e-4


@dataclass(frozen=True)
class GridState:
    vm: np.ndarray  # p.u.
    va: np.ndarray  # radians

    @property
    def V(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)

    def copy(self) -> "GridState":
        return GridState(self.vm.copy(), self.va.copy())


@dataclass(frozen=True)
class Measurements:
    """Bus injections and from-side branch flows, all in p.u."""

    p_inj: np.ndarray
    q_inj: np.ndarray
    p_flow: np.ndarray
    q_flow: np.ndarray
    sigma: np.ndarray

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.p_inj, self.q_inj, self.p_flow, self.q_flow])

    def __len__(self) -> int:
        return len(self.sigma)

    @classmethod
    def from_vector(cls, z: np.ndarray, n_bus: int, sigma: np.ndarray | None = None) -> "Measurements":
        m = (len(z) - 2 * n_bus) // 2
        if sigma is None:
            sigma = noise_sigma(z)
        n = n_bus
        return cls(z[:n].copy(), z[n : 2 * n].copy(), z[2 * n : 2 * n + m].copy(), z[2 * n + m :].copy(), sigma)


def noise_sigma(z: np.ndarray, rel: float = NOISE_REL, floor: float = SIGMA_FLOOR) -> np.ndarray:
    return np.maximum(rel * np.abs(z), floor)


def _y(case_or_y) -> Admittance:
    return case_or_y if isinstance(case_or_y, Admittance) else admittance_of(case_or_y)


def injections(state: GridState, y: Admittance | GridCase) -> tuple[np.ndarray, np.ndarray]:
    """Net (P, Q) injection at every bus, full sum over the Y-bus row including the diagonal."""
    Y = _y(y).Y
    V = state.V
    S = V * np.conj(Y @ V)
    return S.real, S.imag


def line_flows(state: GridState, case: GridCase | Admittance) -> tuple[np.ndarray, np.ndarray]:
    """From-side (P, Q) flow on every branch."""
    a = _y(case)
    V = state.V
    Vf, Vt = V[a.f_idx], V[a.t_idx]
    S = Vf * np.conj(a.yff * Vf + a.yft * Vt)
    return S.real, S.imag


def measurement_function(
    state: GridState, case: GridCase, rel: float = NOISE_REL, floor: float = SIGMA_FLOOR
) -> Measurements:
    p, q = injections(state, case)
    pf, qf = line_flows(state, case)
    z = np.concatenate([p, q, pf, qf])
    return Measurements(p, q, pf, qf, noise_sigma(z, rel, floor))


def dS_dV(state: GridState, y: Admittance) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of complex bus injections w.r.t. angle and magnitude."""
    Y = y.Y
    V = state.V
    I = Y @ V
    Vn = V / np.abs(V)
    dVa = 1j * V[:, None] * np.conj(np.diag(I) - Y * V[None, :])
    dVm = V[:, None] * np.conj(Y * Vn[None, :]) + np.diag(np.conj(I) * Vn)
    return dVa, dVm


def dSf_dV(state: GridState, y: Admittance) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of complex from-side branch flows w.r.t. angle and magnitude."""
    n, m = y.n, len(y.f_idx)
    V = state.V
    Vn = V / np.abs(V)
    rows = np.arange(m)
    Yf = np.zeros((m, n), dtype=complex)
    np.add.at(Yf, (rows, y.f_idx), y.yff)
    np.add.at(Yf, (rows, y.t_idx), y.yft)
    If = Yf @ V
    Vf = V[y.f_idx]
    Cf_V = np.zeros((m, n), dtype=complex)
    Cf_V[rows, y.f_idx] = V[y.f_idx]
    Cf_Vn = np.zeros((m, n), dtype=complex)
    Cf_Vn[rows, y.f_idx] = Vn[y.f_idx]
    dVa = 1j * (np.conj(If)[:, None] * Cf_V - Vf[:, None] * np.conj(Yf * V[None, :]))
    dVm = np.conj(If)[:, None] * Cf_Vn + Vf[:, None] * np.conj(Yf * Vn[None, :])
    return dVa, dVm


def measurement_jacobian(state: GridState, case: GridCase) -> np.ndarray:
    """d z / d [va, vm] with z = (p_inj, q_inj, p_flow, q_flow); shape (2n + 2m, 2n)."""
    y = admittance_of(case)
    sa, sm = dS_dV(state, y)
    fa, fm = dSf_dV(state, y)
    return np.block(
        [
            [sa.real, sm.real],
            [sa.imag, sm.imag],
            [fa.real, fm.real],
            [fa.imag, fm.imag],
        ]
    )


def _setpoints(case: GridCase) -> tuple[np.ndarray, np.ndarray, float]:
    vm = np.ones(case.n_bus)
    for g, i in zip(case.gens, case.gen_idx):
        vm[i] = g.vg
    va_ref = np.deg2rad(case.buses[case.slack].va_init)
    return vm, vm.copy(), va_ref


def flat_start(case: GridCase) -> GridState:
    vm, _, va_ref = _setpoints(case)
    va = np.zeros(case.n_bus)
    va[case.slack] = va_ref
    return GridState(vm, va)


def pf_mismatch(state: GridState, case: GridCase) -> np.ndarray:
    """Mismatch vector: P at PV+PQ buses then Q at PQ buses."""
    p_sched, q_sched = case.scheduled_injection()
    p, q = injections(state, case)
    pvpq = np.r_[case.pv, case.pq]
    return np.r_[p[pvpq] - p_sched[pvpq], q[case.pq] - q_sched[case.pq]]


def pf_jacobian(state: GridState, case: GridCase) -> np.ndarray:
    pvpq = np.r_[case.pv, case.pq]
    pq = case.pq
    dVa, dVm = dS_dV(state, admittance_of(case))
    return np.block(
        [
            [dVa.real[np.ix_(pvpq, pvpq)], dVm.real[np.ix_(pvpq, pq)]],
            [dVa.imag[np.ix_(pq, pvpq)], dVm.imag[np.ix_(pq, pq)]],
        ]
    )


def newton_raphson(
    case: GridCase, start: GridState | None = None, tol: float = PF_TOL, max_iter: int = PF_MAX_ITER
) -> tuple[GridState, int]:
    """Solve the power flow; returns the state and the number of Newton steps taken."""
    vm_set, _, va_ref = _setpoints(case)
    if start is None:
        state = flat_start(case)
    else:
        vm = start.vm.copy()
        va = start.va.copy()
        fixed = np.r_[case.pv, case.slack]
        vm[fixed] = vm_set[fixed]
        va[case.slack] = va_ref
        state = GridState(vm, va)

    pvpq = np.r_[case.pv, case.pq]
    pq = case.pq
    npvpq = len(pvpq)
    F = pf_mismatch(state, case)
    for it in range(max_iter + 1):
        if F.size == 0 or np.max(np.abs(F)) < tol:
            return state, it
        if it == max_iter:
            break
        J = pf_jacobian(state, case)
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian("power-flow Jacobian is singular") from exc
        if not np.all(np.isfinite(dx)):
            raise SingularJacobian("power-flow update is not finite")
        va = state.va.copy()
        vm = state.vm.copy()
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
        state = GridState(vm, va)
        F = pf_mismatch(state, case)
        if not np.all(np.isfinite(F)):
            break
    raise NonConvergence(f"Newton-Raphson did not converge in {max_iter} iterations")


def solve_powerflow(case: GridCase, start: GridState | None = None) -> GridState:
    state, iters = newton_raphson(case, start)
    log.debug("power flow converged in %d iterations", iters)
    return state
