"""AdamW, warmup + cosine schedule, early stopping and the training loop."""

from __future__ import annotations

import copy
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import DivergedLoss, ShapeMismatch
from .models import AceotConfig, Model, build_model


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 256
    warmup_steps: int = 500
    peak_lr: float | None = None  # None: take the model config's tuned rate
    min_lr: float = 0.0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    patience: int = 16
    min_delta: float = 1e-4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.peak_lr is not None and not self.peak_lr > 0:
            raise ValueError("peak_lr must be positive")
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    decay_mask: Sequence[bool] | None = None,
) -> None:
    """One in-place AdamW update with decoupled weight decay and bias correction."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and optimizer state differ in length")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (w, g) in enumerate(zip(params, grads)):
        if w.shape != g.shape or w.shape != state.m[i].shape:
            raise ShapeMismatch(f"slot {i}: param {w.shape}, grad {g.shape}, state {state.m[i].shape}")
        if weight_decay and (decay_mask is None or decay_mask[i]):
            w *= 1.0 - lr * weight_decay
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        w -= lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)


def lr_at(step: int, total_steps: int, cfg: TrainConfig, peak_lr: float | None = None) -> float:
    """Linear warmup over ``warmup_steps`` then cosine decay to ``min_lr`` at ``total_steps``."""
    peak = peak_lr if peak_lr is not None else cfg.peak_lr
    if peak is None:
        raise ValueError("no peak learning rate given")
    w = cfg.warmup_steps
    if step < w:
        return peak * (step + 1) / w
    span = max(1, total_steps - w)
    progress = min(1.0, (step - w) / span)
    return cfg.min_lr + (peak - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


class EarlyStopping:
    """Stop when the best validation loss has not improved by more than min_delta for ``patience`` epochs."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Record one epoch (1-based). Returns (improved, should_stop)."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


@dataclass
class TrainReport:
    model: str
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False
    wall_time_s: float = 0.0

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time_s")
        return d


@dataclass
class Split:
    """Arrays for one dataset split; features standardized, float64 in memory."""

    features: np.ndarray  # (rows, n, 2)
    labels: np.ndarray  # (rows, n) uint8
    kinds: np.ndarray  # (rows,) uint8
    timesteps: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)


def batch_loss(model: Model, split: Split, adj_norm: np.ndarray, batch_size: int = 512) -> float:
    """Eval-mode mean BCE over every node of every sample."""
    total = 0.0
    pw = model.config.pos_weight
    with ad.no_grad():
        for i in range(0, len(split), batch_size):
            x = split.features[i : i + batch_size]
            logits = model.forward(x, adj_norm, training=False)
            total += float(ad.bce_with_logits(logits, split.labels[i : i + batch_size], pw).data) * len(x)
    return total / max(1, len(split))


def fit(
    kind: str,
    splits: dict[str, Split],
    train_cfg: TrainConfig,
    model_cfg: AceotConfig,
    adj_norm: np.ndarray,
    log: Callable[[str], None] | None = print,
) -> tuple[Model, TrainReport]:
    """Train one model; returns it loaded with the best-validation-epoch parameters."""
    train, val = splits["train"], splits["val"]
    model = build_model(kind, model_cfg, seed=train_cfg.seed)
    params = model.parameters()
    state = AdamState.zeros_like([p.data for p in params])
    decay = [p.decay for p in params]
    peak = train_cfg.peak_lr if train_cfg.peak_lr is not None else model_cfg.lr

    shuffle_rng = np.random.default_rng([train_cfg.seed, 1])
    dropout_rng = np.random.default_rng([train_cfg.seed, 2])
    n_batches = math.ceil(len(train) / train_cfg.batch_size)
    total_steps = train_cfg.max_epochs * n_batches
    stopper = EarlyStopping(train_cfg.patience, train_cfg.min_delta)
    report = TrainReport(model=kind)
    best_state = model.state_dict()
    start = time.perf_counter()
    step = 0

    for epoch in range(1, train_cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(train))
        running = 0.0
        for b in range(n_batches):
            idx = order[b * train_cfg.batch_size : (b + 1) * train_cfg.batch_size]
            lr = lr_at(step, total_steps, train_cfg, peak)
            model.zero_grad()
            logits = model.forward(train.features[idx], adj_norm, training=True, rng=dropout_rng)
            loss = ad.bce_with_logits(logits, train.labels[idx], model_cfg.pos_weight)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergedLoss(f"loss became {value} at epoch {epoch}, step {step}")
            ad.backward(loss)
            adamw_step(
                [p.data for p in params],
                [p.grad for p in params],
                state,
                lr,
                train_cfg.weight_decay,
                train_cfg.betas,
                train_cfg.eps,
                decay,
            )
            running += value * len(idx)
            step += 1

        val_loss = batch_loss(model, val, adj_norm)
        if not math.isfinite(val_loss):
            raise DivergedLoss(f"validation loss became {val_loss} at epoch {epoch}")
        report.train_loss.append(running / len(train))
        report.val_loss.append(val_loss)
        report.lr.append(lr)
        improved, stop = stopper.update(epoch, val_loss)
        if improved:
            best_state = copy.deepcopy(model.state_dict())
        if log:
            log(f"epoch {epoch:3d}  train {report.train_loss[-1]:.5f}  val {val_loss:.5f}  lr {lr:.2e}")
        if stop:
            report.stopped_early = True
            break

    model.load_state_dict(best_state)
    report.best_epoch = stopper.best_epoch
    report.best_val_loss = min(report.val_loss)
    report.wall_time_s = time.perf_counter() - start
    return model, report
