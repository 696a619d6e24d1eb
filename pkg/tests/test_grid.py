import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridshield.caseio import BranchRecord, GridCase, parse_case
from gridshield.errors import DisconnectedGraph, InvalidRoot, ZeroDegree
from gridshield.grid import (
    GENERATOR,
    ZERO_INJECTION,
    admittance_of,
    bfs_region,
    build_admittance,
    hop_distances,
    normalized_adjacency,
    normalized_laplacian,
    weighted_adjacency,
)


def ybus_loop(case):
    """Textbook element-by-element Y-bus construction."""
    n = case.n_bus
    ix = case.bus_index
    Y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        f, t = ix[br.from_bus], ix[br.to_bus]
        ys = 1 / complex(br.r, br.x)
        a = br.tap * np.exp(1j * np.radians(br.shift))
        Y[f, f] += (ys + 1j * br.b_charging / 2) / abs(a) ** 2
        Y[t, t] += ys + 1j * br.b_charging / 2
        Y[f, t] -= ys / np.conj(a)
        Y[t, f] -= ys / a
    for i, b in enumerate(case.buses):
        Y[i, i] += complex(b.gs, b.bs) / case.base_mva
    return Y


@pytest.mark.parametrize("name", ["case5", "case14", "case300"])
def test_ybus_matches_loop_oracle(name, request):
    from gridshield.caseio import bundled_case

    c = bundled_case(name)
    np.testing.assert_allclose(build_admittance(c).Y, ybus_loop(c), rtol=0, atol=1e-10)


def test_ybus_without_shifters_is_symmetric(case14):
    Y = build_admittance(case14).Y
    np.testing.assert_allclose(Y, Y.T, atol=1e-12)


def test_admittance_memoized(case14):
    assert admittance_of(case14) is admittance_of(case14)


def test_adjacency_weights(case14):
    g = weighted_adjacency(case14)
    br = case14.branches[0]
    assert g.adj[0, 1] == pytest.approx(1 / abs(complex(br.r, br.x)))
    np.testing.assert_array_equal(g.adj, g.adj.T)
    assert np.all(np.diag(g.adj) == 0)
    assert np.flatnonzero(g.is_zero_injection).tolist() == [6]
    assert np.flatnonzero(g.is_generator).tolist() == [0, 1, 2, 5, 7]
    assert g.flags(6) == {ZERO_INJECTION} and g.flags(0) == {GENERATOR}


def test_parallel_branches_sum(case5):
    extra = BranchRecord(1, 2, 0.01, 0.02, 0.0, 1.0, 0.0)
    c = GridCase(case5.base_mva, case5.buses, case5.branches + (extra,), case5.gens)
    base = weighted_adjacency(case5).adj
    i, j = c.bus_index[1], c.bus_index[2]
    assert weighted_adjacency(c).adj[i, j] == pytest.approx(base[i, j] + 1 / abs(complex(0.01, 0.02)))


def test_disconnected_graph_rejected(case5):
    with pytest.raises(DisconnectedGraph):
        weighted_adjacency(GridCase(case5.base_mva, case5.buses, case5.branches[:1], case5.gens))


@pytest.mark.parametrize("name", ["case14", "case300"])
def test_normalized_adjacency_spectrum(name):
    from gridshield.caseio import bundled_case

    g = weighted_adjacency(bundled_case(name))
    A = normalized_adjacency(g)
    np.testing.assert_array_equal(A, A.T)
    ev = np.linalg.eigvalsh(A)
    # D^-1/2 A D^-1/2 of a connected graph: top eigenvalue exactly 1, spectrum in [-1, 1]
    assert ev.max() == pytest.approx(1.0, abs=1e-10)
    assert ev.min() >= -1 - 1e-10
    L = normalized_laplacian(g)
    assert np.linalg.eigvalsh(L).min() == pytest.approx(0.0, abs=1e-10)


def test_zero_degree_rejected(case14):
    g = weighted_adjacency(case14)
    adj = g.adj.copy()
    adj[3, :] = adj[:, 3] = 0
    from dataclasses import replace

    with pytest.raises(ZeroDegree):
        normalized_adjacency(replace(g, adj=adj))


def test_bfs_region_case14(case14):
    g = weighted_adjacency(case14)
    # bus 9 (index 8): neighbours 4, 7, 10, 14; bus 7 is zero-injection
    assert bfs_region(g, 8, 1) == frozenset({3, 8, 9, 13})
    assert bfs_region(g, 8, 0) == frozenset({8})
    assert bfs_region(g, 8, 1, exclude=set()) == frozenset({3, 6, 8, 9, 13})
    with pytest.raises(InvalidRoot):
        bfs_region(g, 14, 1)
    with pytest.raises(ValueError):
        bfs_region(g, 0, -1)


def test_bfs_root_with_flag_warns(case14, caplog):
    g = weighted_adjacency(case14)
    assert 0 not in bfs_region(g, 0, 1)
    assert "excluded flag" in caplog.text


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 13), st.integers(0, 5))
def test_bfs_region_equals_hop_filter(root, radius):
    from gridshield.caseio import bundled_case

    g = weighted_adjacency(bundled_case("case14"))
    d = hop_distances(g, root)
    want = {i for i in range(g.n) if d[i] <= radius and not g.flags(i)}
    assert bfs_region(g, root, radius, warn=False) == want
    # monotone in the radius
    assert bfs_region(g, root, radius, warn=False) <= bfs_region(g, root, radius + 1, warn=False)
