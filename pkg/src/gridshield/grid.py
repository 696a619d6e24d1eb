"""Graph and admittance views of a GridCase."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .caseio import GridCase
from .errors import DisconnectedGraph, InvalidRoot, SingularBranch, ZeroDegree

log = logging.getLogger(__name__)

GENERATOR = "generator"
ZERO_INJECTION = "zero_injection"
DEFAULT_EXCLUDE = frozenset({GENERATOR, ZERO_INJECTION})


@dataclass(frozen=True)
class Admittance:
    """Bus admittance matrix plus the per-branch two-port terms used for flows."""

    Y: np.ndarray  # n x n complex
    yff: np.ndarray  # per branch
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray
    f_idx: np.ndarray
    t_idx: np.ndarray

    @property
    def G(self) -> np.ndarray:
        return self.Y.real

    @property
    def B(self) -> np.ndarray:
        return self.Y.imag

    @property
    def n(self) -> int:
        return self.Y.shape[0]


def _branch_terms(case: GridCase):
    r = np.array([br.r for br in case.branches])
    x = np.array([br.x for br in case.branches])
    if np.any((r == 0) & (x == 0)):
        raise SingularBranch("branch with r = x = 0 has no finite admittance")
    ys = 1.0 / (r + 1j * x)
    bc = np.array([br.b_charging for br in case.branches])
    tap = np.array([br.tap for br in case.branches]) * np.exp(
        1j * np.deg2rad([br.shift for br in case.branches])
    )
    ytt = ys + 0.5j * bc
    yff = ytt / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap
    return yff, yft, ytf, ytt


def build_admittance(case: GridCase) -> Admittance:
    """Assemble the Y-bus (MATPOWER pi-model with off-nominal tap and phase shift)."""
    n = case.n_bus
    f, t = case.f_idx, case.t_idx
    yff, yft, ytf, ytt = _branch_terms(case)
    Y = np.zeros((n, n), dtype=complex)
    np.add.at(Y, (f, f), yff)
    np.add.at(Y, (t, t), ytt)
    np.add.at(Y, (f, t), yft)
    np.add.at(Y, (t, f), ytf)
    ysh = np.array([b.gs + 1j * b.bs for b in case.buses]) / case.base_mva
    Y[np.diag_indices(n)] += ysh
    return Admittance(Y, yff, yft, ytf, ytt, f.copy(), t.copy())


def admittance_of(case: GridCase) -> Admittance:
    """Memoized build_admittance; the result is stored on the (immutable) case."""
    cached = case.__dict__.get("_admittance")
    if cached is None:
        cached = build_admittance(case)
        case.__dict__["_admittance"] = cached
    return cached


@dataclass(frozen=True)
class GridGraph:
    n: int
    adj: np.ndarray
    is_generator: np.ndarray
    is_zero_injection: np.ndarray
    neighbors: tuple[tuple[int, ...], ...] = field(repr=False)

    @property
    def degree(self) -> np.ndarray:
        return self.adj.sum(axis=1)

    def flags(self, bus: int) -> set[str]:
        out = set()
        if self.is_generator[bus]:
            out.add(GENERATOR)
        if self.is_zero_injection[bus]:
            out.add(ZERO_INJECTION)
        return out


def weighted_adjacency(case: GridCase) -> GridGraph:
    """Symmetric graph with edge weight |1/(r + jx)|, parallel branches summed."""
    n = case.n_bus
    adj = np.zeros((n, n))
    nbrs: list[set[int]] = [set() for _ in range(n)]
    for br, i, j in zip(case.branches, case.f_idx, case.t_idx):
        if br.r == 0 and br.x == 0:
            raise SingularBranch(f"branch {br.from_bus}-{br.to_bus} has zero impedance")
        w = 1.0 / abs(complex(br.r, br.x))
        adj[i, j] += w
        adj[j, i] += w
        nbrs[i].add(j)
        nbrs[j].add(i)

    is_gen = np.zeros(n, dtype=bool)
    is_gen[case.gen_idx] = True
    zero = np.array([b.p_load == 0 and b.q_load == 0 for b in case.buses]) & ~is_gen

    neighbors = tuple(tuple(sorted(s)) for s in nbrs)
    if len(_hops(neighbors, 0, n)) != n:
        raise DisconnectedGraph("network graph is not connected")
    return GridGraph(n, adj, is_gen, zero, neighbors)


def _hops(neighbors, root: int, radius: int) -> dict[int, int]:
    dist = {root: 0}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        if dist[u] == radius:
            continue
        for v in neighbors[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def normalized_adjacency(g: GridGraph) -> np.ndarray:
    """D^-1/2 A D^-1/2."""
    deg = g.degree
    if np.any(deg <= 0):
        raise ZeroDegree(f"buses with zero degree: {np.flatnonzero(deg <= 0).tolist()}")
    s = 1.0 / np.sqrt(deg)
    out = s[:, None] * g.adj * s[None, :]
    # exact symmetry regardless of rounding order
    return 0.5 * (out + out.T)


def normalized_laplacian(g: GridGraph) -> np.ndarray:
    return np.eye(g.n) - normalized_adjacency(g)


def bfs_region(
    g: GridGraph,
    root: int,
    radius: int,
    exclude: frozenset[str] | set[str] = DEFAULT_EXCLUDE,
    warn: bool = True,
) -> frozenset[int]:
    """Buses within ``radius`` hops of ``root`` minus those carrying an excluded flag."""
    if not 0 <= root < g.n:
        raise InvalidRoot(f"root {root} outside 0..{g.n - 1}")
    if radius < 0:
        raise ValueError("radius must be non-negative")
    region = set(_hops(g.neighbors, root, radius))
    if warn and g.flags(root) & set(exclude):
        log.warning("BFS root %d carries an excluded flag and is dropped from its region", root)
    return frozenset(b for b in region if not (g.flags(b) & set(exclude)))


def hop_distances(g: GridGraph, root: int) -> np.ndarray:
    """Unweighted hop distance from root to every bus."""
    d = _hops(g.neighbors, root, g.n)
    out = np.full(g.n, np.iinfo(np.int64).max)
    for k, v in d.items():
        out[k] = v
    return out
