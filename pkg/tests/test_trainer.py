import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridshield.errors import DivergedLoss, ShapeMismatch
from gridshield.grid import normalized_adjacency, weighted_adjacency
from gridshield.models import AceotConfig
from gridshield.trainer import (
    AdamState,
    EarlyStopping,
    Split,
    TrainConfig,
    adamw_step,
    fit,
    lr_at,
)

CFG = TrainConfig(peak_lr=1e-3, min_lr=1e-5)


def plain_adam(w, grads, lr, betas=(0.9, 0.999), eps=1e-8):
    """Reference Adam written from the textbook recursion."""
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t, g in enumerate(grads, start=1):
        m = betas[0] * m + (1 - betas[0]) * g
        v = betas[1] * v + (1 - betas[1]) * g * g
        w = w - lr * (m / (1 - betas[0] ** t)) / (np.sqrt(v / (1 - betas[1] ** t)) + eps)
    return w


# --------------------------------------------------------------------------- schedule


def test_lr_continuity_at_warmup_end():
    for total in (600, 10_000, 65_536):
        assert abs(lr_at(500, total, CFG) - lr_at(499, total, CFG)) <= 1e-12


def test_lr_landmarks():
    total = 2500
    assert lr_at(499, total, CFG) == CFG.peak_lr
    assert lr_at(0, total, CFG) == CFG.peak_lr / 500
    assert lr_at(500 + (total - 500) // 2, total, CFG) == pytest.approx((CFG.peak_lr + CFG.min_lr) / 2, rel=1e-12)
    assert lr_at(total, total, CFG) == pytest.approx(CFG.min_lr, abs=1e-18)
    assert lr_at(total + 1000, total, CFG) == lr_at(total, total, CFG)
    assert lr_at(10, total, TrainConfig(), peak_lr=2e-3) == 2e-3 * 11 / 500
    with pytest.raises(ValueError):
        lr_at(10, total, TrainConfig())


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 20_000), st.integers(501, 20_000))
def test_lr_bounded_and_monotone_pieces(step, total):
    lr = lr_at(step, total, CFG)
    assert 0 < lr <= CFG.peak_lr
    if step >= 500:
        assert lr >= CFG.min_lr - 1e-18
    if step < 499:
        assert lr_at(step + 1, total, CFG) > lr
    elif step >= 500:
        assert lr_at(step + 1, total, CFG) <= lr


# --------------------------------------------------------------------------- optimizer


def test_zero_gradient_decay_identity(rng):
    w = rng.normal(size=(4, 3))
    w0 = w.copy()
    adamw_step([w], [np.zeros_like(w)], AdamState.zeros_like([w]), lr=0.1, weight_decay=0.01)
    np.testing.assert_array_equal(w, 0.999 * w0)


def test_decay_mask_skips_unmasked(rng):
    a, b = rng.normal(size=3), rng.normal(size=3)
    a0, b0 = a.copy(), b.copy()
    adamw_step([a, b], [np.zeros(3), np.zeros(3)], AdamState.zeros_like([a, b]), 0.1, 0.01, decay_mask=[True, False])
    np.testing.assert_array_equal(a, 0.999 * a0)
    np.testing.assert_array_equal(b, b0)


def test_first_step_magnitude():
    w = np.array([0.0])
    adamw_step([w], [np.array([1.0])], AdamState.zeros_like([w]), lr=0.1, weight_decay=0.0)
    assert w[0] == -0.1 * (1 / (1 + 1e-8))


def test_constant_gradient_unit_step():
    w = np.array([0.0])
    state = AdamState.zeros_like([w])
    for _ in range(1000):
        prev = w.copy()
        adamw_step([w], [np.array([0.3])], state, lr=0.01, weight_decay=0.0)
    assert abs(prev[0] - w[0]) == pytest.approx(0.01, rel=0.01)


def test_no_decay_equals_plain_adam(rng):
    w = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(50)]
    ref = plain_adam(w.copy(), grads, 0.01)
    state = AdamState.zeros_like([w])
    for g in grads:
        adamw_step([w], [g], state, 0.01, weight_decay=0.0)
    np.testing.assert_array_equal(w, ref)


def test_adam_shape_errors():
    w = np.zeros(3)
    with pytest.raises(ShapeMismatch):
        adamw_step([w], [np.zeros(4)], AdamState.zeros_like([w]), 0.1)
    with pytest.raises(ShapeMismatch):
        adamw_step([w], [], AdamState.zeros_like([w]), 0.1)


# --------------------------------------------------------------------------- early stopping


def run_stopper(trace, patience, min_delta):
    s = EarlyStopping(patience, min_delta)
    for epoch, v in enumerate(trace, start=1):
        _, stop = s.update(epoch, v)
        if stop:
            return epoch, s.best_epoch
    return None, s.best_epoch


def reference_stop(trace, patience, min_delta):
    """Brute force: first epoch whose trailing ``patience`` epochs all failed to beat the running best."""
    best, best_epoch, bad = math.inf, 0, 0
    for epoch, v in enumerate(trace, start=1):
        if v < best - min_delta:
            best, best_epoch, bad = v, epoch, 0
        else:
            bad += 1
        if bad >= patience:
            return epoch, best_epoch
    return None, best_epoch


def test_stopping_examples():
    assert run_stopper([1.0, 1.0], 1, 1e-4) == (2, 1)
    # improvements smaller than min_delta do not reset patience
    assert run_stopper([1.0, 0.99995, 0.9999, 0.9998], 2, 1e-4) == (3, 1)
    # comparison is against the best so far, not the previous epoch
    assert run_stopper([1.0, 2.0, 1.5, 1.2, 0.5], 3, 1e-4) == (4, 1)
    assert run_stopper([1.0, 0.5, 0.4, 0.3], 2, 1e-4) == (None, 4)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(0, 2, allow_nan=False), min_size=1, max_size=40),
    st.integers(1, 6),
    st.sampled_from([0.0, 1e-4, 0.05]),
)
def test_stopping_matches_reference(trace, patience, min_delta):
    assert run_stopper(trace, patience, min_delta) == reference_stop(trace, patience, min_delta)


# --------------------------------------------------------------------------- fit


def toy_splits(case5, rng, rows):
    """Labels are a deterministic function of the features: bus attacked iff P > 1."""
    out = {}
    for name, n in rows.items():
        x = rng.normal(size=(n, 5, 2))
        y = (x[..., 0] > 1.0).astype(np.uint8)
        out[name] = Split(x, y, (y.any(1)).astype(np.uint8))
    return out


@pytest.fixture(scope="module")
def toy(case5):
    rng = np.random.default_rng(3)
    return toy_splits(case5, rng, {"train": 256, "val": 64}), normalized_adjacency(weighted_adjacency(case5))


def small_cfg(kind):
    return AceotConfig(n_buses=5, h_c=16, mlp_layers=3, dropout=0.0, pos_weight=1.0, lr=1e-2)


def test_fit_learns_separable_toy(toy):
    splits, A = toy
    tcfg = TrainConfig(batch_size=64, max_epochs=200, warmup_steps=20, patience=200, seed=1)
    model, rep = fit("mlp", splits, tcfg, small_cfg("mlp"), A, log=None)
    assert rep.train_loss[-1] < 0.05
    assert rep.best_val_loss == min(rep.val_loss)
    assert len(rep.train_loss) == len(rep.val_loss) == len(rep.lr)


def test_fit_deterministic_and_restores_best(toy):
    splits, A = toy
    tcfg = TrainConfig(batch_size=64, max_epochs=12, warmup_steps=5, patience=3, seed=7)
    m1, r1 = fit("aceot", splits, tcfg, AceotConfig(n_buses=5, h_c=8, d_model=8, d_ff=8, heads=2, lr=5e-3), A, log=None)
    m2, r2 = fit("aceot", splits, tcfg, AceotConfig(n_buses=5, h_c=8, d_model=8, d_ff=8, heads=2, lr=5e-3), A, log=None)
    assert r1.to_dict(include_timing=False) == r2.to_dict(include_timing=False)
    for k, v in m1.state_dict().items():
        np.testing.assert_array_equal(v, m2.state_dict()[k])
    from gridshield.trainer import batch_loss

    assert batch_loss(m1, splits["val"], A) == pytest.approx(r1.best_val_loss, rel=1e-12)
    assert r1.val_loss[r1.best_epoch - 1] == r1.best_val_loss


def test_fit_logs_progress(toy):
    splits, A = toy
    lines = []
    fit("mlp", splits, TrainConfig(batch_size=128, max_epochs=2, seed=0), small_cfg("mlp"), A, log=lines.append)
    assert len(lines) == 2 and lines[0].startswith("epoch   1")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_diverged(toy):
    splits, A = toy
    bad = dict(splits)
    x = splits["train"].features.copy()
    x[0, 0, 0] = np.nan
    bad["train"] = Split(x, splits["train"].labels, splits["train"].kinds)
    with pytest.raises(DivergedLoss):
        fit("mlp", bad, TrainConfig(batch_size=256, max_epochs=1), small_cfg("mlp"), A, log=None)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(peak_lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 3})
    c = TrainConfig(seed=4, betas=[0.8, 0.9])
    assert TrainConfig.from_dict(c.to_dict()) == c
