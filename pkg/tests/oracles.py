"""Plain-Python reference implementations used to cross-check the vectorized metrics."""

import numpy as np

from gridshield import evalkit


def counts(pred, truth):
    tp = fp = tn = fn = 0
    for p, t in zip(pred, truth):
        p, t = bool(p), bool(t)
        if p and t:
            tp += 1
        elif p:
            fp += 1
        elif t:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def rates(tp, fp, tn, fn):
    clean = fp == 0 and fn == 0
    dr = tp / (tp + fn) if tp + fn > 0 else (1.0 if clean else 0.0)
    fa = fp / (fp + tn) if fp + tn > 0 else (0.0 if clean else 1.0)
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn > 0 else (1.0 if clean else 0.0)
    return dr, fa, f1


def unit_f1s(pred_rows, truth_rows):
    return [rates(*counts(p, t))[2] for p, t in zip(pred_rows, truth_rows)]


def columns(rows):
    return [list(c) for c in zip(*rows)]


def pct(values, test):
    return 100.0 * sum(1 for v in values if test(v)) / len(values) if values else 0.0


def random_case(rng):
    """Random predictions and labels with a bias toward degenerate units."""
    s, n = int(rng.integers(1, 12)), int(rng.integers(1, 6))
    mode = rng.integers(4)
    truth = rng.random((s, n)) < (0.0 if mode == 0 else 0.4)
    if mode == 1:
        pred = truth.copy()
    elif mode == 2:
        pred = np.zeros_like(truth)
    else:
        pred = rng.random((s, n)) < 0.4
    kinds = np.where(truth.any(1), rng.integers(1, 5, s), 0)
    return pred, truth, kinds


def check_case(pred, truth, kinds):
    """Assert exact agreement of every evalkit metric with the counting oracle."""
    graph_pred, graph_truth = pred.any(1), truth.any(1)
    d = evalkit.detection_eval(graph_pred, graph_truth, kinds)
    ref = rates(*counts(graph_pred, graph_truth))
    assert (d["overall"]["dr"], d["overall"]["fa"], d["overall"]["f1"]) == ref
    for code, name in enumerate(("A_o", "A_d", "A_s", "A_r"), start=1):
        keep = [i for i in range(len(kinds)) if kinds[i] in (0, code)]
        ref = rates(*counts(graph_pred[keep], graph_truth[keep]))
        row = d["per_kind"][name]
        assert (row["dr"], row["fa"], row["f1"]) == ref
    loc = evalkit.localization_eval(pred, truth)
    sw = unit_f1s(pred.tolist(), truth.tolist())
    nw = unit_f1s(columns(pred.tolist()), columns(truth.tolist()))
    assert loc["sw_f1"].tolist() == sw
    assert loc["nw_f1"].tolist() == nw
    for key, vals in (("sw", sw), ("nw", nw)):
        assert loc[key]["pct_f1_ge_95"] == pct(vals, lambda v: v >= 0.95)
        assert loc[key]["pct_f1_le_5"] == pct(vals, lambda v: v <= 0.05)
    flat = counts(pred.ravel(), truth.ravel())
    c = evalkit.Confusion.of(pred.ravel(), truth.ravel())
    assert (c.tp, c.fp, c.tn, c.fn) == flat
    assert evalkit.rates(c) == rates(*flat)
