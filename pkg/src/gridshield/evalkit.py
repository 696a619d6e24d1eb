"""Detection and localization metrics, inference timing and report output."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import LengthMismatch, ShapeMismatch
from .fdia import ATTACK_KINDS, KIND_CODES

THRESHOLD = 0.5
HIGH_F1 = 0.95
LOW_F1 = 0.05
SEEN_KINDS = ("A_o", "A_d")


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def of(cls, pred, truth) -> "Confusion":
        p = np.asarray(pred, dtype=bool)
        t = np.asarray(truth, dtype=bool)
        return cls(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & ~t)), int(np.sum(~p & t)))


def rates(c: Confusion) -> tuple[float, float, float]:
    """(DR, FA, F1). A rate with a zero denominator is 1/0/1 when the unit has no errors, else 0/1/0."""
    clean = c.fp == 0 and c.fn == 0
    dr = c.tp / (c.tp + c.fn) if c.tp + c.fn else (1.0 if clean else 0.0)
    fa = c.fp / (c.fp + c.tn) if c.fp + c.tn else (0.0 if clean else 1.0)
    den = 2 * c.tp + c.fp + c.fn
    f1 = 2 * c.tp / den if den else (1.0 if clean else 0.0)
    return dr, fa, f1


def _rate_dict(c: Confusion) -> dict:
    dr, fa, f1 = rates(c)
    return {"dr": dr, "fa": fa, "f1": f1, "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn}


def graph_predictions(node_probs: np.ndarray) -> np.ndarray:
    """Sample is flagged when its most suspicious bus exceeds the threshold."""
    node_probs = np.asarray(node_probs)
    if node_probs.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    return node_probs.max(axis=1) > THRESHOLD


def detection_eval(graph_preds, graph_truth, kinds) -> dict:
    """Pooled detection metrics plus one row per attack kind (attacked rows of that kind + every healthy row)."""
    p = np.asarray(graph_preds, dtype=bool)
    t = np.asarray(graph_truth, dtype=bool)
    k = np.asarray(kinds)
    if not len(p) == len(t) == len(k):
        raise LengthMismatch(f"lengths differ: preds {len(p)}, truth {len(t)}, kinds {len(k)}")
    out = {"overall": _rate_dict(Confusion.of(p, t)), "per_kind": {}}
    healthy = k == KIND_CODES["none"]
    for name in ATTACK_KINDS:
        m = healthy | (k == KIND_CODES[name])
        out["per_kind"][name] = _rate_dict(Confusion.of(p[m], t[m]))
    seen = healthy | np.isin(k, [KIND_CODES[s] for s in SEEN_KINDS])
    out["seen"] = _rate_dict(Confusion.of(p[seen], t[seen]))
    return out


def unit_f1(pred: np.ndarray, truth: np.ndarray, axis: int) -> np.ndarray:
    """F1 per unit along ``axis`` (1: per sample across buses, 0: per bus across samples)."""
    p = np.asarray(pred, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    tp = np.sum(p & t, axis=axis)
    fp = np.sum(p & ~t, axis=axis)
    fn = np.sum(~p & t, axis=axis)
    den = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(den > 0, 2 * tp / np.maximum(den, 1), 1.0)
    return f1


def _pcts(f1: np.ndarray) -> dict:
    if f1.size == 0:
        return {"pct_f1_ge_95": 0.0, "pct_f1_le_5": 0.0}
    return {
        "pct_f1_ge_95": 100.0 * int(np.count_nonzero(f1 >= HIGH_F1)) / f1.size,
        "pct_f1_le_5": 100.0 * int(np.count_nonzero(f1 <= LOW_F1)) / f1.size,
    }


def localization_eval(node_preds, node_truth) -> dict:
    """Sample-wise and node-wise F1 distributions for 0/1 node predictions."""
    p = np.asarray(node_preds)
    t = np.asarray(node_truth)
    if p.shape != t.shape or p.ndim != 2:
        raise ShapeMismatch(f"prediction shape {p.shape} vs truth shape {t.shape}")
    sw = unit_f1(p, t, axis=1)
    nw = unit_f1(p, t, axis=0)
    return {"sw": _pcts(sw), "nw": _pcts(nw), "sw_f1": sw, "nw_f1": nw}


@dataclass
class EvalReport:
    model: str
    system: str
    n_samples: int
    detection: dict
    sw: dict
    nw: dict
    inference_ms: float | None = None
    sw_f1: np.ndarray | None = field(default=None, repr=False)
    nw_f1: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        d.pop("sw_f1")
        d.pop("nw_f1")
        if not include_timing:
            d.pop("inference_ms")
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"


def evaluate(node_probs: np.ndarray, labels: np.ndarray, kinds: np.ndarray, model: str = "", system: str = "") -> EvalReport:
    node_probs = np.asarray(node_probs)
    labels = np.asarray(labels)
    if node_probs.shape != labels.shape:
        raise ShapeMismatch(f"probabilities {node_probs.shape} vs labels {labels.shape}")
    truth = labels.any(axis=1)
    det = detection_eval(graph_predictions(node_probs), truth, kinds)
    loc = localization_eval(node_probs > THRESHOLD, labels)
    return EvalReport(model, system, len(labels), det, loc["sw"], loc["nw"], None, loc["sw_f1"], loc["nw_f1"])


def time_inference(model, features: np.ndarray, adj_norm: np.ndarray, repeats: int = 1000, warmup: int = 10) -> float:
    """Mean wall-clock milliseconds of one eval-mode single-sample forward pass."""
    from . import autodiff as ad

    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if len(features) == 0:
        raise ValueError("no samples to time")
    with ad.no_grad():
        for i in range(warmup):
            model.forward(features[i % len(features)][None], adj_norm, training=False)
        start = time.perf_counter()
        for i in range(repeats):
            model.forward(features[i % len(features)][None], adj_norm, training=False)
        elapsed = time.perf_counter() - start
    return 1000.0 * elapsed / repeats


def _pct(x: float) -> str:
    return f"{100.0 * x:6.2f}"


def format_table(report: EvalReport) -> str:
    """Aligned-column text: detection per kind then localization percentages."""
    lines = [f"model {report.model}  system {report.system}  samples {report.n_samples}", ""]
    lines.append(f"{'attack':<8} {'DR %':>7} {'FA %':>7} {'F1 %':>7}")
    rows = [(k, report.detection["per_kind"][k]) for k in ATTACK_KINDS]
    rows += [("seen", report.detection["seen"]), ("overall", report.detection["overall"])]
    for name, r in rows:
        lines.append(f"{name:<8} {_pct(r['dr']):>7} {_pct(r['fa']):>7} {_pct(r['f1']):>7}")
    lines.append("")
    lines.append(f"{'unit':<8} {'F1>=95 %':>9} {'F1<=5 %':>9}")
    for name, r in (("sample", report.sw), ("node", report.nw)):
        lines.append(f"{name:<8} {r['pct_f1_ge_95']:9.2f} {r['pct_f1_le_5']:9.2f}")
    if report.inference_ms is not None:
        lines.append("")
        lines.append(f"inference {report.inference_ms:.3f} ms/sample")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, directory: str | Path, include_timing: bool = False) -> dict[str, Path]:
    """JSON report, text table and per-unit F1 CSVs."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"json": d / "report.json", "table": d / "report.txt", "sw": d / "sw_f1.csv", "nw": d / "nw_f1.csv"}
    paths["json"].write_text(report.to_json(include_timing), encoding="utf-8")
    paths["table"].write_text(format_table(report), encoding="utf-8")
    for key, col, values in (("sw", "sample", report.sw_f1), ("nw", "bus", report.nw_f1)):
        with open(paths[key], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([col, "f1"])
            for i, v in enumerate(values if values is not None else []):
                w.writerow([i if key == "sw" else i + 1, repr(float(v))])
    return paths
