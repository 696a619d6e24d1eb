"""False data injection attacks over BFS regions of the grid."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .acpf import GridState, Measurements, injections, measurement_function
from .caseio import GridCase
from .errors import (
    DegenerateStats,
    InfeasibleAttack,
    InsufficientHistory,
    RegionExhausted,
    TooFewSamples,
)
from .grid import GridGraph, admittance_of, bfs_region, weighted_adjacency
from .trainer import AdamState, adamw_step

log = logging.getLogger(__name__)

KIND_CODES = {"none": 0, "A_o": 1, "A_d": 2, "A_s": 3, "A_r": 4}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
ATTACK_KINDS = ("A_o", "A_d", "A_s", "A_r")

RADIUS_BOUNDS = {"ieee14": (2, 3), "ieee300": (6, 8), "case5": (1, 2)}
REGION_TRIES = 100
SCALE_BOUNDS = (0.8, 1.2)
REPLAY_DELAY = 4

# A_o optimizer defaults
AO_STEPS = 300
AO_LR = 0.01
AO_JITTER = (0.05, 0.01)  # std of angle (rad) and magnitude (p.u.) jitter
AO_BOX = (0.1, 0.02)  # bound on |angle offset| and |magnitude offset|
AO_BETA = 1.0  # weight of the deviation-target shortfall against the noise-weighted consistency loss
AO_TARGET = 0.25  # per-bus target change as a fraction of the bus's apparent power
AO_SCALE_FLOOR = 0.05  # p.u.; smallest apparent power used to size a target
AO_KEEP = 0.5  # fraction of its target a bus must reach to count as attacked
AO_WEIGHT_DECAY = 0.01
AO_POLISH = 10  # Gauss-Newton refinement steps on the consistency loss after the AdamW phase
AO_POLISH_TOL = 1e-10  # refinement stops once the noise-weighted loss is this small
MIN_TAU_SAMPLES = 100


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    region: frozenset[int]
    root: int
    radius: int
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not self.region:
            raise ValueError("attack region is empty")


@dataclass
class HealthySample:
    """One healthy timestep: true state, noisy meter readings, estimate and the estimated injections."""

    timestep: int
    state: GridState
    z: Measurements
    x_hat: GridState
    features: np.ndarray  # (n, 2) raw p.u.


@dataclass
class AttackedSample:
    features: np.ndarray  # (n, 2)
    labels: np.ndarray  # (n,) uint8
    kind: str
    timestep: int
    spec: AttackSpec | None = None

    def __post_init__(self) -> None:
        if self.kind != "none" and not self.labels.any():
            raise ValueError("attacked sample without any attacked bus")


def region_array(region) -> np.ndarray:
    return np.array(sorted(region), dtype=np.int64)


def select_region(
    g: GridGraph, rng: np.random.Generator, system: str, radius_bounds: tuple[int, int] | None = None
) -> tuple[int, int, frozenset[int]]:
    """Uniform root and radius; region is the BFS ball minus generator and zero-injection buses."""
    lo, hi = radius_bounds if radius_bounds is not None else RADIUS_BOUNDS[system]
    for _ in range(REGION_TRIES):
        root = int(rng.integers(g.n))
        radius = int(rng.integers(lo, hi + 1))
        region = bfs_region(g, root, radius, warn=False)
        if g.flags(root):
            log.debug("root %d is excluded from its own region", root)
        if region:
            return root, radius, region
    raise RegionExhausted(f"no non-empty region after {REGION_TRIES} draws")


def boundary_of(g: GridGraph, region) -> np.ndarray:
    """Buses outside the region adjacent to at least one region bus."""
    out = set()
    for b in region:
        out.update(g.neighbors[b])
    return np.array(sorted(out - set(region)), dtype=np.int64)


def attack_scale(values: np.ndarray, rng: np.random.Generator | None = None, u: float | None = None) -> np.ndarray:
    """Multiply every region entry by one shared factor u ~ U(0.8, 1.2)."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("no values to scale")
    if u is None:
        u = rng.uniform(*SCALE_BOUNDS)
    return values * u


def attack_replay(history: Sequence[np.ndarray] | np.ndarray, t: int, tau: int = REPLAY_DELAY) -> np.ndarray:
    """Values recorded tau steps earlier. ``history[k]`` holds the values at step k."""
    if tau < 0:
        raise ValueError("replay delay must be non-negative")
    if t - tau < 0:
        raise InsufficientHistory(f"step {t} has no recording {tau} steps back")
    return np.array(history[t - tau], dtype=float, copy=True)


@dataclass(frozen=True)
class HealthyStats:
    """Per-bus, per-feature mean and std of healthy raw features, tagged with the split they came from."""

    mean: np.ndarray  # (n, 2)
    std: np.ndarray  # (n, 2)
    source_split: str = "train"

    @classmethod
    def from_features(cls, features: np.ndarray, source_split: str = "train") -> "HealthyStats":
        features = np.asarray(features, dtype=float)
        return cls(features.mean(axis=0), features.std(axis=0), source_split)


def attack_distribution(
    stats: HealthyStats, region, rng: np.random.Generator, strict: bool = True
) -> np.ndarray:
    """Draw each region entry from N(mu, sigma^2) of its own bus and feature.

    With ``strict`` a zero sigma inside the region raises DegenerateStats; otherwise the draw is mu.
    """
    assert stats.source_split == "train", "distribution attack must use training-split statistics"
    idx = region_array(region)
    mu, sd = stats.mean[idx], stats.std[idx]
    if not np.all(np.isfinite(sd)) or np.any(sd < 0):
        raise DegenerateStats("statistics contain negative or non-finite spread")
    if strict and np.any(sd == 0):
        raise DegenerateStats(f"zero spread at buses {idx[np.any(sd == 0, axis=1)].tolist()}")
    return mu + sd * rng.standard_normal(mu.shape)


@dataclass
class OptimizedAttack:
    values: np.ndarray  # (k, 2) attacked (P, Q) of the kept region buses, ascending bus order
    region: frozenset[int]  # buses whose injections moved enough to count as attacked
    state: GridState
    loss: float
    deviation: float
    shortfall: float
    step: int


class _AttackProblem:
    """Boundary consistency loss and per-bus deviation targets for the region injections, with gradients.

    ``loss`` sums squared boundary-injection mismatches, in units of meter noise when sigma is given.
    ``shortfall`` sums squared relative gaps between each region bus's apparent-power change and its
    target ``rho * max(|S0|, floor)``.
    """

    def __init__(
        self,
        x_hat: GridState,
        case: GridCase,
        region,
        boundary: np.ndarray,
        sigma: np.ndarray | None = None,
        rho: float = 0.25,
    ):
        self.case = case
        self.y = admittance_of(case)
        self.base = x_hat
        self.R = region_array(region)
        self.B = boundary
        p0, q0 = injections(x_hat, self.y)
        self.p0, self.q0 = p0, q0
        n = case.n_bus
        self.wb = np.ones(2 * len(boundary)) if sigma is None else 1.0 / np.r_[sigma[boundary], sigma[n + boundary]]
        self.target = rho * np.maximum(np.hypot(p0[self.R], q0[self.R]), AO_SCALE_FLOOR)

    def state(self, delta: np.ndarray) -> GridState:
        k = len(self.R)
        va = self.base.va.copy()
        vm = self.base.vm.copy()
        va[self.R] += delta[:k]
        vm[self.R] += delta[k:]
        return GridState(vm, va)

    def moves(self, st: GridState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Weighted boundary mismatch, region (dP, dQ) and per-bus apparent change."""
        p, q = injections(st, self.y)
        eb = self.wb * np.r_[p[self.B] - self.p0[self.B], q[self.B] - self.q0[self.B]]
        dr = np.stack([p[self.R] - self.p0[self.R], q[self.R] - self.q0[self.R]], axis=1)
        return eb, dr, np.hypot(dr[:, 0], dr[:, 1])

    def evaluate(self, delta: np.ndarray, grad: bool = True):
        st = self.state(delta)
        eb, dr, mag = self.moves(st)
        gap = (mag - self.target) / self.target
        loss = float(eb @ eb)
        dev = float(np.sum(dr * dr))
        short = float(gap @ gap)
        if not grad:
            return loss, dev, short, None, None
        jb, jr = self.jacobians(st)
        k = len(self.R)
        g_loss = 2.0 * jb.T @ eb
        safe = np.maximum(mag, 1e-12)
        dmag = (dr[:, 0:1] * jr[:k] + dr[:, 1:2] * jr[k:]) / safe[:, None]
        g_short = 2.0 * dmag.T @ (gap / self.target)
        return loss, dev, short, g_loss, g_short

    def jacobians(self, st: GridState) -> tuple[np.ndarray, np.ndarray]:
        """Weighted boundary and plain region injection Jacobians w.r.t. [angle, magnitude] offsets."""
        Y = self.y.Y
        V = st.V
        I = Y @ V
        Vn = V / np.abs(V)
        R = self.R

        def jac(rows):
            Yb = Y[np.ix_(rows, R)]
            eye = (rows[:, None] == R[None, :]).astype(float)
            Vr = V[rows][:, None]
            d_a = 1j * Vr * np.conj(eye * I[rows][:, None] - Yb * V[R][None, :])
            d_m = Vr * np.conj(Yb * Vn[R][None, :]) + eye * (np.conj(I[rows]) * Vn[rows])[:, None]
            return np.block([[d_a.real, d_m.real], [d_a.imag, d_m.imag]])

        return jac(self.B) * self.wb[:, None], jac(R)

    def polish(self, delta: np.ndarray, bound: np.ndarray, iters: int) -> np.ndarray:
        """Minimum-norm Gauss-Newton steps on the boundary residual, with step halving."""
        if len(self.B) == 0:
            return delta
        delta = delta.copy()
        loss = self.evaluate(delta, grad=False)[0]
        for _ in range(iters):
            if loss < AO_POLISH_TOL:
                break
            st = self.state(delta)
            eb, _, _ = self.moves(st)
            jb, _ = self.jacobians(st)
            step = np.linalg.lstsq(jb, -eb, rcond=None)[0]
            alpha = 1.0
            for _ in range(20):
                cand = np.clip(delta + alpha * step, -bound, bound)
                closs = self.evaluate(cand, grad=False)[0]
                if closs < loss:
                    break
                alpha *= 0.5
            else:
                break
            delta, loss = cand, closs
        return delta


def attack_optimized(
    sample: HealthySample,
    case: GridCase,
    region,
    rng: np.random.Generator,
    tau_loss: float | None,
    g: GridGraph | None = None,
    steps: int = AO_STEPS,
    lr: float = AO_LR,
    jitter: tuple[float, float] = AO_JITTER,
    beta: float = AO_BETA,
    box: tuple[float, float] = AO_BOX,
    rho: float = AO_TARGET,
    weighted: bool = True,
    polish_iters: int = AO_POLISH,
    decay_lr: bool = True,
    keep_fraction: float = 0.0,
) -> OptimizedAttack:
    """Perturb the region's estimated state so its injections move while boundary injections stay consistent.

    ``L + beta * shortfall`` is minimized with AdamW from a jittered start inside a box, then a few
    Gauss-Newton steps pull the consistency loss ``L`` toward zero. Among the visited iterates with
    ``L <= tau_loss`` the one closest to the deviation targets is returned. With ``tau_loss=None`` the
    final iterate is returned unconditionally, which is how the loss distribution is probed.

    Region buses whose change stays below ``keep_fraction`` of their target are dropped from the
    returned region; if none remain the attack is infeasible.
    """
    g = g if g is not None else weighted_adjacency(case)
    sigma = sample.z.sigma if weighted else None
    prob = _AttackProblem(sample.x_hat, case, region, boundary_of(g, region), sigma, rho)
    k = len(prob.R)
    sd = np.r_[np.full(k, jitter[0]), np.full(k, jitter[1])]
    bound = np.r_[np.full(k, box[0]), np.full(k, box[1])]
    delta = np.clip(sd * rng.standard_normal(2 * k), -bound, bound)
    opt = AdamState.zeros_like([delta])

    def better(cand, best):
        return best is None or cand[2] < best[2]

    best = None
    loss = np.inf
    for step in range(steps + 1):
        last = step == steps
        loss, dev, short, gl, gs = prob.evaluate(delta, grad=not last)
        if tau_loss is not None and loss <= tau_loss and better((loss, dev, short), best):
            best = (loss, dev, short, delta.copy(), step)
        if last:
            break
        # cosine-decayed step lets the iterate settle instead of oscillating at the lr scale
        lr_t = lr * 0.5 * (1.0 + np.cos(np.pi * step / steps)) if decay_lr else lr
        adamw_step([delta], [gl + beta * gs], opt, lr_t, AO_WEIGHT_DECAY)
        np.clip(delta, -bound, bound, out=delta)

    if polish_iters:
        delta = prob.polish(delta, bound, polish_iters)
        loss, dev, short, _, _ = prob.evaluate(delta, grad=False)
        if tau_loss is not None and loss <= tau_loss and better((loss, dev, short), best):
            best = (loss, dev, short, delta.copy(), steps + 1)
    if tau_loss is None:
        best = (loss, dev, short, delta.copy(), steps)
    if best is None:
        raise InfeasibleAttack(f"no iterate reached consistency loss <= {tau_loss:.3e}")
    loss, dev, short, delta, step = best
    st = prob.state(delta)
    _, dr, mag = prob.moves(st)
    keep = mag >= keep_fraction * prob.target
    if not keep.any():
        raise InfeasibleAttack("no region bus reached its deviation target")
    values = np.stack([prob.p0[prob.R], prob.q0[prob.R]], axis=1)[keep] + dr[keep]
    kept = frozenset(int(b) for b in prob.R[keep])
    return OptimizedAttack(values, kept, st, loss, dev, short, step)


def tau_from_losses(losses: Sequence[float]) -> float:
    """Outlier bound Q3 + 1.5 IQR with linearly interpolated quartiles."""
    arr = np.asarray(losses, dtype=float)
    q1, q3 = np.percentile(arr, [25, 75])
    return float(q3 + 1.5 * (q3 - q1))


def compute_tau_loss(
    healthy_set: Sequence[HealthySample],
    case: GridCase,
    g: GridGraph,
    system: str,
    seed: int,
    radius_bounds: tuple[int, int] | None = None,
    **attack_kw,
) -> tuple[float, np.ndarray]:
    """Probe the optimized attack once per healthy sample and return (tau_loss, losses)."""
    if len(healthy_set) < MIN_TAU_SAMPLES:
        raise TooFewSamples(f"need >= {MIN_TAU_SAMPLES} healthy samples, got {len(healthy_set)}")
    losses = []
    for s in healthy_set:
        rng = np.random.default_rng([seed, s.timestep, STREAM_PROBE])
        _, _, region = select_region(g, rng, system, radius_bounds)
        res = attack_optimized(s, case, region, rng, None, g, **attack_kw)
        losses.append(res.loss)
    losses = np.array(losses)
    return tau_from_losses(losses), losses


# rng stream identifiers for per-sample generators default_rng([seed, timestep, stream])
STREAM_HEALTHY = 0
STREAM_ATTACK = 1
STREAM_PROBE = 2


def attacked_measurements(
    sample: HealthySample, case: GridCase, region, attacked_state: GridState
) -> Measurements:
    """Meter readings after the attacker rewrites region injections and flows on region-incident branches.

    The injected vector is h(x_attacked) - h(x_hat) restricted to the meters the attacker controls.
    """
    n, m = case.n_bus, case.n_branch
    a = measurement_function(attacked_state, case).z - measurement_function(sample.x_hat, case).z
    R = region_array(region)
    in_r = np.zeros(n, dtype=bool)
    in_r[R] = True
    touched = np.flatnonzero(in_r[case.f_idx] | in_r[case.t_idx])
    mask = np.zeros(2 * n + 2 * m, dtype=bool)
    mask[R] = True
    mask[n + R] = True
    mask[2 * n + touched] = True
    mask[2 * n + m + touched] = True
    za = sample.z.z + np.where(mask, a, 0.0)
    return Measurements.from_vector(za, n, sample.z.sigma.copy())


def apply_attack(healthy: HealthySample, spec: AttackSpec, values: np.ndarray) -> AttackedSample:
    """Overwrite the region rows of the healthy features and label them."""
    idx = region_array(spec.region)
    values = np.asarray(values, dtype=float)
    if values.shape != (len(idx), 2):
        raise ValueError(f"attack values have shape {values.shape}, expected {(len(idx), 2)}")
    if not np.all(np.isfinite(values)):
        raise ValueError("attack produced non-finite values")
    feats = healthy.features.copy()
    feats[idx] = values
    labels = np.zeros(len(feats), dtype=np.uint8)
    labels[idx] = 1
    return AttackedSample(feats, labels, spec.kind, healthy.timestep, spec)
