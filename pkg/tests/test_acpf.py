import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridshield.acpf import (
    GridState,
    Measurements,
    injections,
    line_flows,
    measurement_function,
    measurement_jacobian,
    newton_raphson,
    noise_sigma,
    pf_jacobian,
    pf_mismatch,
    solve_powerflow,
)
from gridshield.caseio import bundled_case
from gridshield.errors import NonConvergence
from gridshield.grid import build_admittance

# published IEEE 14-bus load-flow solution
VM14 = [1.060, 1.045, 1.010, 1.018, 1.020, 1.070, 1.062, 1.090, 1.056, 1.051, 1.057, 1.055, 1.050, 1.036]
VA14 = [0.0, -4.98, -12.72, -10.32, -8.78, -14.22, -13.37, -13.36, -14.94, -15.10, -14.79, -15.08, -15.16, -16.03]


def polar_injections(state, Y):
    """P_i = V_i sum_j V_j (G_ij cos t_ij + B_ij sin t_ij), Q likewise, as explicit loops."""
    n = len(state.vm)
    G, B = Y.real, Y.imag
    P, Q = np.zeros(n), np.zeros(n)
    for i in range(n):
        for j in range(n):
            t = state.va[i] - state.va[j]
            P[i] += state.vm[i] * state.vm[j] * (G[i, j] * np.cos(t) + B[i, j] * np.sin(t))
            Q[i] += state.vm[i] * state.vm[j] * (G[i, j] * np.sin(t) - B[i, j] * np.cos(t))
    return P, Q


def random_state(n, rng):
    return GridState(rng.uniform(0.9, 1.1, n), rng.uniform(-0.4, 0.4, n))


def test_ieee14_published_solution(case14):
    s, iters = newton_raphson(case14)
    np.testing.assert_allclose(s.vm, VM14, atol=1.5e-3)
    np.testing.assert_allclose(np.degrees(s.va), VA14, atol=2e-2)
    assert np.max(np.abs(pf_mismatch(s, case14))) < 1e-8
    assert iters <= 6


@pytest.mark.parametrize("name", ["case5", "case300"])
def test_other_cases_converge(name):
    c = bundled_case(name)
    s = solve_powerflow(c)
    assert np.max(np.abs(pf_mismatch(s, c))) < 1e-8


def test_injections_match_polar_oracle(case14, rng):
    s = random_state(14, rng)
    P, Q = injections(s, case14)
    Po, Qo = polar_injections(s, build_admittance(case14).Y)
    np.testing.assert_allclose(P, Po, atol=1e-10)
    np.testing.assert_allclose(Q, Qo, atol=1e-10)


def test_flow_balance(case14, rng):
    """Injection at each bus equals the sum of flows leaving it through branches and shunts."""
    s = random_state(14, rng)
    a = build_admittance(case14)
    V = s.V
    pf, qf = line_flows(s, case14)
    St = V[a.t_idx] * np.conj(a.ytf * V[a.f_idx] + a.ytt * V[a.t_idx])
    total = np.zeros(14, dtype=complex)
    np.add.at(total, a.f_idx, pf + 1j * qf)
    np.add.at(total, a.t_idx, St)
    ysh = np.array([complex(b.gs, b.bs) for b in case14.buses]) / case14.base_mva
    total += np.abs(V) ** 2 * np.conj(ysh)
    P, Q = injections(s, case14)
    np.testing.assert_allclose(total.real, P, atol=1e-10)
    np.testing.assert_allclose(total.imag, Q, atol=1e-10)


def _fd_jacobian(f, x, h=1e-6):
    cols = []
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=1)


def test_pf_jacobian_finite_difference(case14):
    s = solve_powerflow(case14)
    pvpq = np.r_[case14.pv, case14.pq]
    pq = case14.pq
    x0 = np.r_[s.va[pvpq], s.vm[pq]]

    def F(x):
        va, vm = s.va.copy(), s.vm.copy()
        va[pvpq] = x[: len(pvpq)]
        vm[pq] = x[len(pvpq) :]
        return pf_mismatch(GridState(vm, va), case14)

    np.testing.assert_allclose(pf_jacobian(s, case14), _fd_jacobian(F, x0), atol=1e-6)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_measurement_jacobian_finite_difference(seed):
    case = bundled_case("case14")
    s = random_state(14, np.random.default_rng(seed))

    def h(x):
        return measurement_function(GridState(x[14:], x[:14]), case).z

    np.testing.assert_allclose(measurement_jacobian(s, case), _fd_jacobian(h, np.r_[s.va, s.vm]), atol=1e-6)


def test_measurement_layout(case14):
    s = solve_powerflow(case14)
    m = measurement_function(s, case14)
    assert len(m) == 2 * 14 + 2 * 20
    m2 = Measurements.from_vector(m.z, 14, m.sigma)
    np.testing.assert_array_equal(m2.p_flow, m.p_flow)
    np.testing.assert_array_equal(m2.q_inj, m.q_inj)
    np.testing.assert_array_equal(noise_sigma(np.array([0.0, 2.0, -0.5])), [1e-4, 0.02, 0.005])


def test_warm_start_resets_setpoints(case14):
    s = solve_powerflow(case14)
    warm = GridState(s.vm * 1.01, s.va + 0.01)
    s2, it = newton_raphson(case14, warm)
    np.testing.assert_allclose(s2.vm, s.vm, atol=1e-8)
    np.testing.assert_allclose(s2.va, s.va, atol=1e-8)


def test_nonconvergence_on_infeasible_load():
    c = bundled_case("case5")
    from dataclasses import replace

    heavy = replace(c, buses=tuple(replace(b, p_load=b.p_load * 40, q_load=b.q_load * 40) for b in c.buses))
    with pytest.raises(NonConvergence):
        newton_raphson(heavy, max_iter=15)
