"""Dataset factory: healthy operating points over a load profile, attacks, splits, standardization, files."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fdia
from .acpf import Measurements, injections, measurement_function, noise_sigma, solve_powerflow
from .caseio import (
    GridCase,
    bundled_case,
    bundled_profile_text,
    interpolate_profile,
    parse_case,
    parse_load_profile,
    read_text,
    write_case,
)
from .errors import (
    ChecksumMismatch,
    DegenerateStats,
    InfeasibleAttack,
    InsufficientTimesteps,
    NonConvergence,
    RankDeficient,
    SchemaMismatch,
    SingularJacobian,
)
from .fdia import KIND_CODES, HealthySample, HealthyStats
from .grid import GridGraph, weighted_adjacency
from .sse import wlse_estimate
from .trainer import Split

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")
SYSTEM_CASES = {"ieee14": "case14", "ieee300": "case300", "case5": "case5"}

# rows per split and kind at full scale
FULL_COUNTS = {
    "train": {"A_o": 5760, "A_d": 5760, "A_s": 0, "A_r": 0},
    "val": {"A_o": 1440, "A_d": 1440, "A_s": 0, "A_r": 0},
    "test": {"A_o": 720, "A_d": 720, "A_s": 720, "A_r": 720},
}
DESK_SCALE = 1 / 16
MAX_FAIL_FRACTION = 0.05
ATTACK_TRIES = 20
STD_FLOOR = 1e-12


def split_counts(f: float = 1.0) -> dict[str, dict[str, int]]:
    """Rows per (split, kind) at scale f; healthy rows equal the attacked total of each split."""
    if not f > 0:
        raise ValueError("scale factor must be positive")
    out = {}
    for split, row in FULL_COUNTS.items():
        c = {k: int(round(v * f)) for k, v in row.items()}
        c["none"] = sum(c.values())
        out[split] = c
    return out


@dataclass(frozen=True)
class GenConfig:
    system: str = "ieee14"
    scale: float = DESK_SCALE
    seed: int = 0
    sigma_s: float = 0.02
    noise_rel: float = 0.01
    zone: str = "TOTAL"
    profile_path: str | None = None
    case_path: str | None = None
    resolution_min: int = 1
    replay_tau: int = fdia.REPLAY_DELAY

    def __post_init__(self) -> None:
        if self.case_path is None and self.system not in SYSTEM_CASES:
            raise ValueError(f"unknown system {self.system!r}; expected one of {sorted(SYSTEM_CASES)}")
        if self.sigma_s < 0 or self.noise_rel < 0:
            raise ValueError("noise levels must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown generation config keys: {sorted(unknown)}")
        return cls(**d)


def load_inputs(cfg: GenConfig) -> tuple[GridCase, np.ndarray]:
    """Case and normalized per-step load level S_t for a configuration."""
    case = parse_case(read_text(cfg.case_path)) if cfg.case_path else bundled_case(SYSTEM_CASES[cfg.system])
    text = read_text(cfg.profile_path) if cfg.profile_path else bundled_profile_text()
    profile = interpolate_profile(parse_load_profile(text, cfg.zone), cfg.resolution_min)
    return case, profile.normalized()


def scale_network(case: GridCase, s_t: float, sigma_s: float, rng: np.random.Generator) -> GridCase:
    """Scale each load (P and Q together) and each generator P by its own N(1 + 0.1 s_t, sigma_s^2) draw."""
    mean = 1.0 + 0.1 * s_t
    f_load = np.maximum(rng.normal(mean, sigma_s, case.n_bus), 0.0)
    f_gen = np.maximum(rng.normal(mean, sigma_s, len(case.gens)), 0.0)
    buses = tuple(
        dataclasses.replace(b, p_load=b.p_load * f, q_load=b.q_load * f) for b, f in zip(case.buses, f_load)
    )
    gens = tuple(dataclasses.replace(g, pg=g.pg * f) for g, f in zip(case.gens, f_gen))
    out = dataclasses.replace(case, buses=buses, gens=gens)
    # topology and impedances are unchanged, so the admittance matrix can be shared
    if "_admittance" in case.__dict__:
        out.__dict__["_admittance"] = case.__dict__["_admittance"]
    return out


def healthy_sample(case: GridCase, levels: np.ndarray, t: int, cfg: GenConfig) -> HealthySample | None:
    """Power flow, noisy meters and state estimate at one step; None when a solver fails."""
    rng = np.random.default_rng([cfg.seed, t, fdia.STREAM_HEALTHY])
    scaled = scale_network(case, float(levels[t]), cfg.sigma_s, rng)
    try:
        state = solve_powerflow(scaled)
        clean = measurement_function(state, case).z
        z = clean * (1.0 + rng.uniform(-cfg.noise_rel, cfg.noise_rel, clean.size))
        meas = Measurements.from_vector(z, case.n_bus, noise_sigma(z))
        est = wlse_estimate(meas, case)
    except (NonConvergence, SingularJacobian, RankDeficient) as exc:
        log.warning("step %d skipped: %s", t, exc)
        return None
    p, q = injections(est.x_hat, case)
    return HealthySample(t, state, meas, est.x_hat, np.stack([p, q], axis=1))


def generate_healthy(case: GridCase, levels: np.ndarray, cfg: GenConfig, timesteps) -> list[HealthySample]:
    """Healthy samples for the given steps; failing steps are dropped unless more than 5% fail."""
    steps = list(timesteps)
    out = [s for t in steps if (s := healthy_sample(case, levels, t, cfg)) is not None]
    failed = len(steps) - len(out)
    if steps and failed / len(steps) > MAX_FAIL_FRACTION:
        raise NonConvergence(f"{failed} of {len(steps)} steps failed to solve")
    return out


@dataclass
class DatasetManifest:
    system: str
    n_buses: int
    seed: int
    counts: dict[str, dict[str, int]]
    feature_mean: np.ndarray
    feature_std: np.ndarray
    schema_version: int = SCHEMA_VERSION
    scale: float = 1.0
    tau_loss: float = 0.0
    config: dict = field(default_factory=dict)
    files: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["feature_mean"] = self.feature_mean.tolist()
        d["feature_std"] = self.feature_std.tolist()
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        if d.get("schema_version") != SCHEMA_VERSION:
            raise SchemaMismatch(f"schema version {d.get('schema_version')!r}, expected {SCHEMA_VERSION}")
        try:
            d["feature_mean"] = np.asarray(d["feature_mean"], dtype=float)
            d["feature_std"] = np.asarray(d["feature_std"], dtype=float)
            return cls(**d)
        except (KeyError, TypeError) as exc:
            raise SchemaMismatch(f"manifest fields do not match: {exc}") from exc


@dataclass
class Dataset:
    splits: dict[str, Split]
    manifest: DatasetManifest
    case: GridCase
    # in-memory only: (healthy source, attack spec, (BFS region, attacked state)) of every A_o row
    optimized: list = field(default_factory=list, repr=False)


class _Pool:
    """Shuffled timesteps handed out without replacement; healthy samples are cached per step."""

    def __init__(self, case, levels, cfg: GenConfig, rng: np.random.Generator):
        self.case, self.levels, self.cfg = case, levels, cfg
        self.order = list(rng.permutation(np.arange(cfg.replay_tau, len(levels))))
        self.pos = 0
        self.cache: dict[int, HealthySample | None] = {}
        self.tried = 0
        self.failed = 0

    def sample(self, t: int) -> HealthySample | None:
        if t not in self.cache:
            s = healthy_sample(self.case, self.levels, t, self.cfg)
            self.tried += 1
            self.failed += s is None
            if self.tried >= 100 and self.failed / self.tried > MAX_FAIL_FRACTION:
                raise NonConvergence(f"{self.failed} of {self.tried} steps failed to solve")
            self.cache[t] = s
        return self.cache[t]

    def next(self) -> HealthySample:
        while self.pos < len(self.order):
            t = int(self.order[self.pos])
            self.pos += 1
            s = self.sample(t)
            if s is not None:
                return s
        raise InsufficientTimesteps(f"profile ran out of usable steps after {self.pos}")


def _system_key(cfg: GenConfig) -> str:
    return cfg.system if cfg.system in fdia.RADIUS_BOUNDS else "ieee14"


def _attack(
    kind: str,
    base: HealthySample,
    pool: _Pool,
    g: GridGraph,
    stats: HealthyStats,
    tau_loss: float,
) -> tuple[fdia.AttackedSample, object] | None:
    cfg = pool.cfg
    rng = np.random.default_rng([cfg.seed, base.timestep, fdia.STREAM_ATTACK])
    for _ in range(ATTACK_TRIES):
        root, radius, region = fdia.select_region(g, rng, _system_key(cfg))
        idx = fdia.region_array(region)
        spec = fdia.AttackSpec(kind, region, root, radius)
        extra = None
        try:
            if kind == "A_o":
                res = fdia.attack_optimized(base, pool.case, region, rng, tau_loss, g, keep_fraction=fdia.AO_KEEP)
                values = res.values
                spec = fdia.AttackSpec(kind, res.region, root, radius, {"tau_loss": tau_loss, "loss": res.loss})
                # the attacker rewrites every meter of the BFS region, labels cover buses that moved
                extra = (region, res.state)
            elif kind == "A_d":
                values = fdia.attack_distribution(stats, region, rng)
            elif kind == "A_s":
                u = float(rng.uniform(*fdia.SCALE_BOUNDS))
                values = fdia.attack_scale(base.features[idx], u=u)
                spec.params.update(u=u)
            elif kind == "A_r":
                src = pool.sample(base.timestep - cfg.replay_tau)
                if src is None:
                    return None
                history = {base.timestep - cfg.replay_tau: src.features[idx]}
                values = fdia.attack_replay(history, base.timestep, cfg.replay_tau)
                spec.params.update(tau=cfg.replay_tau)
            else:
                raise ValueError(kind)
        except (InfeasibleAttack, DegenerateStats) as exc:
            log.debug("step %d: %s attack redrawn (%s)", base.timestep, kind, exc)
            continue
        return fdia.apply_attack(base, spec, values), extra
    return None


def assemble_dataset(cfg: GenConfig, case: GridCase | None = None, levels: np.ndarray | None = None) -> Dataset:
    """Build standardized train/val/test splits at scale ``cfg.scale`` of the full table."""
    if case is None or levels is None:
        case, levels = load_inputs(cfg)
    g = weighted_adjacency(case)
    counts = split_counts(cfg.scale)
    need = sum(sum(c.values()) for c in counts.values())
    if need > len(levels) - cfg.replay_tau:
        raise InsufficientTimesteps(f"{need} samples requested but the profile has {len(levels)} steps")
    master = np.random.default_rng([cfg.seed, 0xDA7A])
    pool = _Pool(case, levels, cfg, master)

    rows: dict[str, list] = {s: [] for s in SPLITS}
    for split in SPLITS:
        for _ in range(counts[split]["none"]):
            h = pool.next()
            rows[split].append((h.features, np.zeros(case.n_bus, np.uint8), KIND_CODES["none"], h.timestep))
    log.info("healthy rows ready (%d steps solved)", pool.tried)

    train_healthy = [pool.cache[r[3]] for r in rows["train"]]
    stats = HealthyStats.from_features(np.stack([h.features for h in train_healthy]), "train")
    tau_loss = 0.0
    if any(counts[s]["A_o"] for s in SPLITS):
        probe = train_healthy if len(train_healthy) >= fdia.MIN_TAU_SAMPLES else [
            pool.next() for _ in range(fdia.MIN_TAU_SAMPLES)
        ]
        tau_loss, _ = fdia.compute_tau_loss(probe, case, g, _system_key(cfg), cfg.seed)
        log.info("consistency bound tau_loss = %.3e", tau_loss)

    optimized = []
    for split in SPLITS:
        for kind in fdia.ATTACK_KINDS:
            made = 0
            while made < counts[split][kind]:
                base = pool.next()
                out = _attack(kind, base, pool, g, stats, tau_loss)
                if out is None:
                    continue
                sample, extra = out
                rows[split].append((sample.features, sample.labels, KIND_CODES[kind], base.timestep))
                if kind == "A_o":
                    optimized.append((base, sample.spec, extra))
                made += 1
        log.info("%s split assembled", split)

    raw = {}
    for split in SPLITS:
        perm = master.permutation(len(rows[split]))
        r = [rows[split][i] for i in perm]
        raw[split] = Split(
            np.stack([x[0] for x in r]).astype(float),
            np.stack([x[1] for x in r]).astype(np.uint8),
            np.array([x[2] for x in r], dtype=np.uint8),
            np.array([x[3] for x in r], dtype=np.int64),
        )
    mean, std = feature_stats(raw["train"].features)
    splits = {k: dataclasses.replace(v, features=(v.features - mean) / std) for k, v in raw.items()}
    manifest = DatasetManifest(
        system=cfg.system,
        n_buses=case.n_bus,
        seed=cfg.seed,
        counts=counts,
        feature_mean=mean,
        feature_std=std,
        scale=cfg.scale,
        tau_loss=tau_loss,
        config=cfg.to_dict(),
    )
    return Dataset(splits, manifest, case, optimized)


def feature_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus, per-feature mean and std; a vanishing std is replaced by 1."""
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std = np.where(std > STD_FLOOR, std, 1.0)
    return mean, std


def generate(cfg: GenConfig) -> Dataset:
    return assemble_dataset(cfg)


# --------------------------------------------------------------------------- files


def _files(split: str) -> dict[str, tuple[str, np.dtype]]:
    return {
        "features": (f"{split}_features.f32", np.dtype("<f4")),
        "labels": (f"{split}_labels.u8", np.dtype("u1")),
        "kinds": (f"{split}_kinds.u8", np.dtype("u1")),
        "timesteps": (f"{split}_timesteps.i64", np.dtype("<i8")),
    }


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(ds: Dataset, directory: str | Path) -> DatasetManifest:
    """Write binary split files, the case and a manifest with per-file SHA-256."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for split, sp in ds.splits.items():
        for attr, (name, dtype) in _files(split).items():
            arr = getattr(sp, attr)
            if arr is None:
                continue
            (d / name).write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes())
            files[name] = _sha256(d / name)
    (d / "case.m").write_text(write_case(ds.case, "case"), encoding="utf-8")
    files["case.m"] = _sha256(d / "case.m")
    manifest = dataclasses.replace(ds.manifest, files=files)
    (d / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    ds.manifest = manifest
    return manifest


def read_dataset(directory: str | Path, verify: bool = True) -> Dataset:
    d = Path(directory)
    manifest = DatasetManifest.from_json((d / "manifest.json").read_text(encoding="utf-8"))
    if verify:
        for name, digest in manifest.files.items():
            if _sha256(d / name) != digest:
                raise ChecksumMismatch(f"{name} does not match its recorded checksum")
    n = manifest.n_buses
    splits = {}
    for split in SPLITS:
        arrays = {}
        for attr, (name, dtype) in _files(split).items():
            path = d / name
            if not path.exists():
                if attr == "timesteps":
                    arrays[attr] = None
                    continue
                raise SchemaMismatch(f"missing {name}")
            arrays[attr] = np.frombuffer(path.read_bytes(), dtype=dtype)
        rows = sum(manifest.counts[split].values())
        try:
            feats = arrays["features"].reshape(rows, n, 2).astype(float)
            labels = arrays["labels"].reshape(rows, n).copy()
            kinds = arrays["kinds"].reshape(rows).copy()
            ts = None if arrays["timesteps"] is None else arrays["timesteps"].reshape(rows).copy()
        except ValueError as exc:
            raise SchemaMismatch(f"{split}: on-disk sizes disagree with the manifest counts") from exc
        splits[split] = Split(feats, labels, kinds, ts)
    case = parse_case((d / "case.m").read_text(encoding="utf-8"))
    return Dataset(splits, manifest, case)


def export_csv(ds: Dataset, path: str | Path, split: str = "test") -> None:
    """One row per sample: timestep, kind, P_1..P_n, Q_1..Q_n, y_1..y_n (standardized features)."""
    sp = ds.splits[split]
    n = ds.manifest.n_buses
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["timestep", "kind"]
            + [f"P_{i + 1}" for i in range(n)]
            + [f"Q_{i + 1}" for i in range(n)]
            + [f"y_{i + 1}" for i in range(n)]
        )
        ts = sp.timesteps if sp.timesteps is not None else np.full(len(sp), -1)
        for i in range(len(sp)):
            w.writerow(
                [int(ts[i]), fdia.KIND_NAMES[int(sp.kinds[i])]]
                + [repr(float(v)) for v in sp.features[i, :, 0]]
                + [repr(float(v)) for v in sp.features[i, :, 1]]
                + [int(v) for v in sp.labels[i]]
            )
