"""Parsing of MATPOWER case text and NYISO-style load profile CSVs."""

from __future__ import annotations

import calendar
import csv
import gzip
import io
import math
import re
from dataclasses import dataclass
from datetime import datetime, timedelta
from functools import cached_property
from importlib import resources
from typing import Iterable

import numpy as np

from .errors import (
    BadResolution,
    DanglingReference,
    DuplicateBusId,
    MalformedCase,
    MalformedCSV,
    MissingSlack,
    NonPositiveLoad,
    NonUniformSpacing,
    UnknownZone,
)

BUS_KINDS = {3: "slack", 2: "pv", 1: "pq"}
KIND_CODES = {v: k for k, v in BUS_KINDS.items()}

# zero-based MATPOWER column indices that are read
BUS_COLS = (0, 1, 2, 3, 4, 5, 7, 8)  # BUS_I TYPE PD QD GS BS VM VA
GEN_COLS = (0, 1, 2, 5)  # GEN_BUS PG QG VG
BRANCH_COLS = (0, 1, 2, 3, 4, 8, 9)  # F_BUS T_BUS BR_R BR_X BR_B TAP SHIFT

TOTAL_ZONE = "TOTAL"
_EPOCH = datetime(1970, 1, 1)


@dataclass(frozen=True)
class BusRecord:
    id: int
    kind: str
    p_load: float
    q_load: float
    gs: float
    bs: float
    vm_init: float
    va_init: float


@dataclass(frozen=True)
class BranchRecord:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float
    tap: float
    shift: float


@dataclass(frozen=True)
class GenRecord:
    bus: int
    pg: float
    qg: float
    vg: float


@dataclass(frozen=True)
class GridCase:
    base_mva: float
    buses: tuple[BusRecord, ...]
    branches: tuple[BranchRecord, ...]
    gens: tuple[GenRecord, ...]

    def __post_init__(self) -> None:
        validate_case(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        """Map external bus id to zero-based position."""
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def slack(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == "slack")

    @cached_property
    def pv(self) -> np.ndarray:
        return np.array([i for i, b in enumerate(self.buses) if b.kind == "pv"], dtype=int)

    @cached_property
    def pq(self) -> np.ndarray:
        return np.array([i for i, b in enumerate(self.buses) if b.kind == "pq"], dtype=int)

    @cached_property
    def f_idx(self) -> np.ndarray:
        return np.array([self.bus_index[br.from_bus] for br in self.branches], dtype=int)

    @cached_property
    def t_idx(self) -> np.ndarray:
        return np.array([self.bus_index[br.to_bus] for br in self.branches], dtype=int)

    @cached_property
    def gen_idx(self) -> np.ndarray:
        return np.array([self.bus_index[g.bus] for g in self.gens], dtype=int)

    def scheduled_injection(self) -> tuple[np.ndarray, np.ndarray]:
        """Net scheduled (P, Q) injection per bus in p.u. (generation minus load)."""
        p = -np.array([b.p_load for b in self.buses])
        q = -np.array([b.q_load for b in self.buses])
        np.add.at(p, self.gen_idx, [g.pg for g in self.gens])
        np.add.at(q, self.gen_idx, [g.qg for g in self.gens])
        return p / self.base_mva, q / self.base_mva


def validate_case(case: GridCase) -> None:
    if not case.base_mva > 0:
        raise MalformedCase(f"baseMVA must be positive, got {case.base_mva}")
    ids = [b.id for b in case.buses]
    seen: set[int] = set()
    for i in ids:
        if i in seen:
            raise DuplicateBusId(f"bus id {i} appears more than once")
        seen.add(i)
    slacks = [b for b in case.buses if b.kind == "slack"]
    if len(slacks) != 1:
        raise MissingSlack(f"expected exactly one slack bus, found {len(slacks)}")
    kinds = {b.id: b.kind for b in case.buses}
    for b in case.buses:
        if not b.vm_init > 0:
            raise MalformedCase(f"bus {b.id}: initial voltage must be positive")
    for br in case.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in kinds:
                raise DanglingReference(f"branch refers to unknown bus {end}")
        if br.from_bus == br.to_bus:
            raise MalformedCase(f"branch {br.from_bus}-{br.to_bus} is a self loop")
        if br.r < 0:
            raise MalformedCase(f"branch {br.from_bus}-{br.to_bus} has negative resistance")
        if br.r == 0 and br.x == 0:
            raise MalformedCase(f"branch {br.from_bus}-{br.to_bus} has zero impedance")
    for g in case.gens:
        if g.bus not in kinds:
            raise DanglingReference(f"generator refers to unknown bus {g.bus}")
        if kinds[g.bus] == "pq":
            raise DanglingReference(f"generator at bus {g.bus} which is a PQ bus")


_COMMENT = re.compile(r"%.*$", re.MULTILINE)
_SCALAR = re.compile(r"mpc\.baseMVA\s*=\s*([^;\n]+);")
_MATRIX = r"mpc\.{name}\s*=\s*\[(.*?)\]\s*;"


def _matrix(text: str, name: str, cols: tuple[int, ...]) -> list[list[float]]:
    m = re.search(_MATRIX.format(name=name), text, re.DOTALL)
    if m is None:
        raise MalformedCase(f"no mpc.{name} matrix found")
    rows = []
    for raw in re.split(r"[;\n]", m.group(1)):
        raw = raw.replace(",", " ").strip()
        if not raw:
            continue
        try:
            vals = [float(tok) for tok in raw.split()]
        except ValueError as exc:
            raise MalformedCase(f"mpc.{name}: bad number in row {raw!r}") from exc
        if len(vals) <= max(cols):
            raise MalformedCase(f"mpc.{name}: row has {len(vals)} columns, need {max(cols) + 1}")
        rows.append([vals[c] for c in cols])
    return rows


def _as_int(v: float, what: str) -> int:
    if not float(v).is_integer():
        raise MalformedCase(f"{what} must be an integer, got {v}")
    return int(v)


def parse_case(text: str) -> GridCase:
    """Parse MATPOWER case text into a validated GridCase.

    Only the columns needed for AC power flow are read; rate limits,
    status flags and cost data are ignored.
    """
    text = _COMMENT.sub("", text)
    m = _SCALAR.search(text)
    if m is None:
        raise MalformedCase("no mpc.baseMVA assignment found")
    try:
        base = float(m.group(1))
    except ValueError as exc:
        raise MalformedCase(f"bad baseMVA {m.group(1)!r}") from exc

    buses = []
    for bid, typ, pd, qd, gs, bs, vm, va in _matrix(text, "bus", BUS_COLS):
        t = _as_int(typ, "bus type")
        if t not in BUS_KINDS:
            raise MalformedCase(f"unsupported bus type {t}")
        buses.append(BusRecord(_as_int(bid, "bus id"), BUS_KINDS[t], pd, qd, gs, bs, vm, va))
    gens = [GenRecord(_as_int(b, "gen bus"), pg, qg, vg) for b, pg, qg, vg in _matrix(text, "gen", GEN_COLS)]
    branches = [
        BranchRecord(_as_int(f, "from bus"), _as_int(t, "to bus"), r, x, b, tap if tap != 0 else 1.0, sh)
        for f, t, r, x, b, tap, sh in _matrix(text, "branch", BRANCH_COLS)
    ]
    return GridCase(base, tuple(buses), tuple(branches), tuple(gens))


def write_case(case: GridCase, name: str = "case") -> str:
    """Serialize a GridCase as MATPOWER text that parse_case reads back exactly."""

    def row(vals: Iterable[float]) -> str:
        return "\t" + "\t".join(repr(float(v)) for v in vals) + ";"

    lines = [f"function mpc = {name}", "mpc.version = '2';", f"mpc.baseMVA = {case.base_mva!r};", "", "mpc.bus = ["]
    for b in case.buses:
        lines.append(row([b.id, KIND_CODES[b.kind], b.p_load, b.q_load, b.gs, b.bs, 1, b.vm_init, b.va_init]))
    lines += ["];", "", "mpc.gen = ["]
    for g in case.gens:
        lines.append(row([g.bus, g.pg, g.qg, 0, 0, g.vg]))
    lines += ["];", "", "mpc.branch = ["]
    for br in case.branches:
        lines.append(row([br.from_bus, br.to_bus, br.r, br.x, br.b_charging, 0, 0, 0, br.tap, br.shift]))
    lines += ["];", ""]
    return "\n".join(lines)


def bundled_case(name: str) -> GridCase:
    """Load one of the shipped cases: ``case5``, ``case14`` or ``case300``."""
    return parse_case(bundled_case_text(name))


def bundled_case_text(name: str) -> str:
    return resources.files("gridshield.data").joinpath(f"{name}.m").read_text(encoding="utf-8")


# --------------------------------------------------------------------------- profiles


@dataclass
class LoadProfile:
    timestamps: np.ndarray  # int64 minutes since 1970-01-01
    values: np.ndarray  # MW
    resolution_min: int

    def __len__(self) -> int:
        return len(self.values)

    def normalized(self) -> np.ndarray:
        """Min-max scaling of the values onto [0, 1]."""
        lo, hi = self.values.min(), self.values.max()
        if hi == lo:
            return np.zeros_like(self.values)
        return (self.values - lo) / (hi - lo)


def _parse_time(s: str) -> int:
    s = s.strip()
    for fmt in ("%m/%d/%Y %H:%M:%S", "%m/%d/%Y %H:%M"):
        try:
            dt = datetime.strptime(s, fmt)
        except ValueError:
            continue
        return int((dt - _EPOCH).total_seconds() // 60)
    raise MalformedCSV(f"unrecognized timestamp {s!r}")


def parse_load_profile(text: str, zone: str = TOTAL_ZONE) -> LoadProfile:
    """Read one zone (or the sum over all zones, ``zone="TOTAL"``) from a NYISO pal CSV."""
    reader = csv.DictReader(io.StringIO(text))
    need = {"Time Stamp", "Name", "Load"}
    if reader.fieldnames is None or not need <= set(reader.fieldnames):
        raise MalformedCSV(f"CSV header must contain {sorted(need)}, got {reader.fieldnames}")

    totals: dict[int, float] = {}
    counts: dict[int, int] = {}
    zones: set[str] = set()
    for rec in reader:
        name = (rec["Name"] or "").strip()
        zones.add(name)
        if zone != TOTAL_ZONE and name != zone:
            continue
        try:
            load = float(rec["Load"])
        except (TypeError, ValueError) as exc:
            raise MalformedCSV(f"bad load value {rec['Load']!r}") from exc
        t = _parse_time(rec["Time Stamp"] or "")
        if zone != TOTAL_ZONE and t in totals:
            raise MalformedCSV(f"duplicate timestamp {rec['Time Stamp']!r} for zone {zone}")
        totals[t] = totals.get(t, 0.0) + load
        counts[t] = counts.get(t, 0) + 1
    if not totals:
        raise UnknownZone(f"zone {zone!r} not found; available: {sorted(zones)}")
    if zone == TOTAL_ZONE and len(set(counts.values())) > 1:
        raise MalformedCSV("zones do not report the same timestamps; cannot form a system total")

    ts = np.array(sorted(totals), dtype=np.int64)
    vals = np.array([totals[t] for t in ts], dtype=float)
    if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
        raise NonPositiveLoad("load values must be finite and positive")
    if len(ts) < 2:
        raise MalformedCSV("a profile needs at least two timestamps")
    steps = np.diff(ts)
    if np.any(steps != steps[0]):
        raise NonUniformSpacing(f"timestamp spacing varies: {sorted(set(steps.tolist()))[:5]} min")
    return LoadProfile(ts, vals, int(steps[0]))


def interpolate_profile(p: LoadProfile, target_min: int) -> LoadProfile:
    if target_min <= 0 or p.resolution_min % target_min:
        raise BadResolution(f"{target_min} min does not divide {p.resolution_min} min")
    if target_min == p.resolution_min:
        return LoadProfile(p.timestamps.copy(), p.values.copy(), p.resolution_min)
    ts = np.arange(p.timestamps[0], p.timestamps[-1] + 1, target_min, dtype=np.int64)
    vals = np.interp(ts, p.timestamps, p.values)
    return LoadProfile(ts, vals, target_min)


def synthetic_nyiso_csv(
    year: int = 2021,
    month: int = 7,
    zones: dict[str, float] | None = None,
    resolution_min: int = 5,
    seed: int = 0,
) -> str:
    """Build a month of NYISO-pal-shaped CSV text with a daily/weekly load shape.

    ``zones`` maps zone name to its mean load in MW.
    """
    zones = zones or {"N.Y.C.": 6000.0, "WEST": 1900.0, "CAPITL": 1300.0}
    rng = np.random.default_rng(seed)
    days = calendar.monthrange(year, month)[1]
    n = days * 24 * 60 // resolution_min
    start = datetime(year, month, 1)
    minutes = np.arange(n) * resolution_min
    hour = (minutes / 60.0) % 24
    weekday = np.array([(start + timedelta(minutes=int(m))).weekday() for m in minutes])
    daily = 0.78 + 0.22 * np.sin(2 * math.pi * (hour - 9) / 24) + 0.05 * np.sin(4 * math.pi * (hour - 3) / 24)
    weekly = np.where(weekday >= 5, 0.92, 1.0)
    # slow heat-wave drift across the month
    drift = 1 + 0.06 * np.sin(2 * math.pi * minutes / (days * 1440) * 2)

    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["Time Stamp", "Time Zone", "Name", "PTID", "Load"])
    series = {}
    for k, (name, mean) in enumerate(zones.items()):
        noise = np.cumsum(rng.normal(0, 0.002, n))
        noise -= np.linspace(noise[0], noise[-1], n)
        series[name] = mean * daily * weekly * drift * (1 + noise)
    for i, m in enumerate(minutes):
        stamp = (start + timedelta(minutes=int(m))).strftime("%m/%d/%Y %H:%M:%S")
        for k, name in enumerate(zones):
            w.writerow([stamp, "EDT", name, 61757 + k, f"{series[name][i]:.1f}"])
    return out.getvalue()


def bundled_profile_text() -> str:
    """The shipped synthetic July-2021 profile (5-minute, three zones)."""
    raw = resources.files("gridshield.data").joinpath("nyiso_synthetic_202107.csv.gz").read_bytes()
    return gzip.decompress(raw).decode("utf-8")


def read_text(path: str) -> str:
    """Read a text file, transparently decompressing ``.gz``."""
    if str(path).endswith(".gz"):
        with gzip.open(path, "rt", encoding="utf-8") as fh:
            return fh.read()
    with open(path, encoding="utf-8") as fh:
        return fh.read()
