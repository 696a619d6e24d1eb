"""Weighted least squares state estimation and largest-normalized-residual bad data detection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .acpf import GridState, Measurements, flat_start, measurement_function, measurement_jacobian
from .caseio import GridCase
from .errors import DegenerateCovariance, NonConvergence, RankDeficient

SE_TOL = 1e-8
SE_MAX_ITER = 50
LNRT_THRESHOLD = 3.0


@dataclass
class EstimationResult:
    x_hat: GridState
    residuals: np.ndarray
    objective: float
    iterations: int
    converged: bool
    sigma: np.ndarray
    H: np.ndarray  # measurement Jacobian at x_hat, slack angle column removed
    objective_trace: list[float]


@dataclass(frozen=True)
class BddResult:
    flagged: bool
    worst_index: int
    max_normalized_residual: float


def _state_from(x: np.ndarray, case: GridCase, va_ref: float) -> GridState:
    n = case.n_bus
    va = np.empty(n)
    mask = np.ones(n, dtype=bool)
    mask[case.slack] = False
    va[mask] = x[: n - 1]
    va[case.slack] = va_ref
    return GridState(x[n - 1 :].copy(), va)


def _objective(z: np.ndarray, w: np.ndarray, state: GridState, case: GridCase) -> tuple[float, np.ndarray]:
    r = z - measurement_function(state, case).z
    return float(r @ (w * r)), r


def wlse_estimate(
    z: Measurements,
    case: GridCase,
    start: GridState | None = None,
    tol: float = SE_TOL,
    max_iter: int = SE_MAX_ITER,
) -> EstimationResult:
    """Gauss-Newton minimization of (z - h(x))^T R^-1 (z - h(x)) with step halving.

    R is diagonal with ``z.sigma``; the slack angle stays at its reference value.
    """
    n = case.n_bus
    zv = z.z
    if len(zv) < 2 * n - 1:
        raise RankDeficient(f"{len(zv)} measurements cannot determine {2 * n - 1} state variables")
    w = 1.0 / z.sigma**2
    state = start if start is not None else flat_start(case)
    va_ref = float(flat_start(case).va[case.slack])
    keep = np.r_[np.delete(np.arange(n), case.slack), n + np.arange(n)]

    x = np.r_[np.delete(state.va, case.slack), state.vm]
    state = _state_from(x, case, va_ref)
    obj, r = _objective(zv, w, state, case)
    trace = [obj]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        H = measurement_jacobian(state, case)[:, keep]
        Hw = H * w[:, None]
        gain = H.T @ Hw
        rhs = Hw.T @ r
        try:
            L = np.linalg.cholesky(gain)
        except np.linalg.LinAlgError as exc:
            raise RankDeficient("gain matrix is not positive definite (unobservable state)") from exc
        dx = np.linalg.solve(L.T, np.linalg.solve(L, rhs))

        alpha = 1.0
        for _ in range(30):
            cand = _state_from(x + alpha * dx, case, va_ref)
            cobj, cr = _objective(zv, w, cand, case)
            if cobj <= obj:
                break
            alpha *= 0.5
        else:
            # no halving lowers the objective: numerically stationary
            converged = True
            break
        x = x + alpha * dx
        state, obj, r = cand, cobj, cr
        trace.append(obj)
        if np.max(np.abs(alpha * dx)) < tol:
            converged = True
            break
    if not converged:
        raise NonConvergence(f"state estimation did not converge in {it} iterations")
    H = measurement_jacobian(state, case)[:, keep]
    return EstimationResult(state, r, obj, it, True, z.sigma.copy(), H, trace)


def residual_covariance_diag(res: EstimationResult) -> np.ndarray:
    """diag(R - H (H^T R^-1 H)^-1 H^T)."""
    R = res.sigma**2
    H = res.H
    gain = H.T @ (H / R[:, None])
    try:
        X = np.linalg.solve(gain, H.T)
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovariance("gain matrix is singular") from exc
    return R - np.einsum("ij,ji->i", H, X)


def lnrt_bdd(res: EstimationResult, threshold: float = LNRT_THRESHOLD) -> BddResult:
    """Largest normalized residual test.

    Critical measurements (residual variance ~ 0) carry no redundancy and are skipped.
    """
    omega = residual_covariance_diag(res)
    R = res.sigma**2
    if np.any(omega < -1e-9 * R):
        raise DegenerateCovariance("residual covariance has negative diagonal entries")
    ok = omega > 1e-10 * R
    if not np.any(ok):
        raise DegenerateCovariance("every measurement is critical; no redundancy to test")
    rn = np.zeros_like(omega)
    rn[ok] = np.abs(res.residuals[ok]) / np.sqrt(omega[ok])
    worst = int(np.argmax(rn))
    return BddResult(bool(rn[worst] > threshold), worst, float(rn[worst]))
