"""ACEOT model and the MLP / ARMAConv-only baselines.

All models map a batch of standardized per-bus (P, Q) features of shape
(batch, n, 2) to per-bus attack logits of shape (batch, n). The sigmoid is
applied by the loss during training and by :func:`node_probabilities` at
inference.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ShapeMismatch, SizeMismatch

MODEL_KINDS = ("aceot", "arma", "mlp")


@dataclass(frozen=True)
class AceotConfig:
    n_buses: int
    h_c: int = 64
    arma_layers: int = 3
    stacks: int = 2
    iterations: int = 3
    heads: int = 4
    enc_layers: int = 1
    d_model: int = 64
    d_ff: int = 128
    dropout: float = 0.25
    pos_weight: float = 8.5
    lr: float = 1e-3
    mlp_layers: int = 3

    def __post_init__(self) -> None:
        counts = ("n_buses", "h_c", "arma_layers", "stacks", "iterations", "heads", "enc_layers", "d_model", "d_ff")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AceotConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# Tuned values for the two systems (ARMAConv rows reuse stacks/iterations, h_c is their hidden width).
DEFAULTS = {
    "ieee14": {
        "aceot": dict(h_c=64, arma_layers=3, stacks=2, iterations=3, heads=4, enc_layers=1,
                      d_model=64, d_ff=128, dropout=0.25, pos_weight=8.5, lr=1e-3),
        "arma": dict(h_c=32, arma_layers=3, stacks=2, iterations=3, dropout=0.10, pos_weight=3.0, lr=2e-3),
        "mlp": dict(h_c=64, mlp_layers=3, dropout=0.20, pos_weight=1.0, lr=1e-3),
    },
    "ieee300": {
        "aceot": dict(h_c=32, arma_layers=3, stacks=3, iterations=5, heads=4, enc_layers=2,
                      d_model=256, d_ff=512, dropout=0.20, pos_weight=9.0, lr=1e-3),
        "arma": dict(h_c=64, arma_layers=3, stacks=3, iterations=5, dropout=0.20, pos_weight=1.5, lr=1e-3),
        "mlp": dict(h_c=128, mlp_layers=3, dropout=0.30, pos_weight=1.0, lr=1e-3),
    },
}


def default_config(system: str, kind: str, n_buses: int, **overrides) -> AceotConfig:
    # small systems (e.g. the bundled 5-bus case) borrow the IEEE-14 settings
    table = DEFAULTS.get(system, DEFAULTS["ieee14"])
    return replace(AceotConfig(n_buses=n_buses, **table[kind]), **overrides)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """Named-parameter container shared by the three architectures."""

    kind = "base"

    def __init__(self, config: AceotConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Parameter] = {}
        self._rng = np.random.default_rng(seed)

    # parameter factories
    def _weight(self, name: str, fan_in: int, fan_out: int) -> Parameter:
        return self._add(Parameter(name, _uniform(self._rng, fan_in, (fan_in, fan_out))))

    def _bias(self, name: str, size: int) -> Parameter:
        return self._add(Parameter(name, np.zeros(size), decay=False))

    def _norm(self, prefix: str, size: int) -> tuple[Parameter, Parameter]:
        g = self._add(Parameter(f"{prefix}.gain", np.ones(size), decay=False))
        b = self._add(Parameter(f"{prefix}.bias", np.zeros(size), decay=False))
        return g, b

    def _add(self, p: Parameter) -> Parameter:
        if p.name in self.params:
            raise ValueError(f"duplicate parameter name {p.name}")
        self.params[p.name] = p
        return p

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            raise SizeMismatch(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in arrays.items():
            if v.shape != self.params[k].shape:
                raise SizeMismatch(f"{k}: checkpoint shape {v.shape} != model shape {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64, copy=True)

    def _check_input(self, features: np.ndarray) -> None:
        if features.ndim != 3 or features.shape[1:] != (self.config.n_buses, 2):
            raise ShapeMismatch(f"features must be (batch, {self.config.n_buses}, 2), got {features.shape}")

    def forward(self, features, adj_norm, training: bool = False, rng=None) -> Tensor:
        raise NotImplementedError


# --------------------------------------------------------------------------- building blocks


class ArmaLayer:
    """K parallel stacks of T recursive propagation steps, averaged."""

    def __init__(self, model: Model, prefix: str, c_in: int, c_out: int, stacks: int, iterations: int):
        self.iterations = iterations
        self.stacks = []
        for k in range(stacks):
            p = f"{prefix}.stack{k}"
            self.stacks.append(
                dict(
                    W0=model._weight(f"{p}.W0", c_in, c_out),
                    W=model._weight(f"{p}.W", c_out, c_out) if iterations > 1 else None,
                    V=model._weight(f"{p}.V", c_in, c_out),
                    b=model._bias(f"{p}.b", c_out),
                )
            )

    def __call__(self, x0: Tensor, adj: Tensor, dropout: float, training: bool, rng, act=ad.relu) -> Tensor:
        outs = []
        for st in self.stacks:
            skip = ad.add(ad.dropout(ad.matmul(x0, st["V"]), dropout, rng, training), st["b"])
            x = act(ad.add(ad.matmul(adj, ad.matmul(x0, st["W0"])), skip))
            for _ in range(1, self.iterations):
                x = act(ad.add(ad.matmul(adj, ad.matmul(x, st["W"])), skip))
            outs.append(x)
        total = outs[0]
        for o in outs[1:]:
            total = ad.add(total, o)
        return ad.scale(total, 1.0 / len(outs))


class ArmaStack:
    """Sequential ARMA layers with layer norm after every second one."""

    def __init__(self, model: Model, prefix: str, c_in: int, hidden: int, layers: int, stacks: int, iterations: int):
        self.layers = []
        self.norms: dict[int, tuple[Parameter, Parameter]] = {}
        for i in range(layers):
            self.layers.append(ArmaLayer(model, f"{prefix}.{i}", c_in if i == 0 else hidden, hidden, stacks, iterations))
            if (i + 1) % 2 == 0:
                self.norms[i] = model._norm(f"{prefix}.{i}.norm", hidden)

    def __call__(self, x: Tensor, adj: Tensor, dropout: float, training: bool, rng) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x, adj, dropout, training, rng)
            if i in self.norms:
                x = ad.layer_norm(x, *self.norms[i])
        return x


class SelfAttention:
    def __init__(self, model: Model, prefix: str, d_model: int, heads: int):
        self.heads = heads
        self.Wq = model._weight(f"{prefix}.Wq", d_model, d_model)
        self.Wk = model._weight(f"{prefix}.Wk", d_model, d_model)
        self.Wv = model._weight(f"{prefix}.Wv", d_model, d_model)
        self.Wo = model._weight(f"{prefix}.Wo", d_model, d_model)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return ad.permute(ad.reshape(x, (b, n, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, dropout: float, training: bool, rng) -> Tensor:
        if x.ndim != 3 or x.shape[-1] % self.heads:
            raise ShapeMismatch(f"attention input {x.shape} incompatible with {self.heads} heads")
        b, n, d = x.shape
        dk = d // self.heads
        q = self._split(ad.matmul(x, self.Wq))
        k = self._split(ad.matmul(x, self.Wk))
        v = self._split(ad.matmul(x, self.Wv))
        weights = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dk)))
        self.last_weights = weights.data
        heads = ad.matmul(ad.dropout(weights, dropout, rng, training), v)
        concat = ad.reshape(ad.permute(heads, (0, 2, 1, 3)), (b, n, d))
        return ad.matmul(concat, self.Wo)


class EncoderLayer:
    """Post-norm transformer encoder layer."""

    def __init__(self, model: Model, prefix: str, d_model: int, d_ff: int, heads: int):
        self.attn = SelfAttention(model, f"{prefix}.attn", d_model, heads)
        self.norm1 = model._norm(f"{prefix}.norm1", d_model)
        self.W1 = model._weight(f"{prefix}.ffn.W1", d_model, d_ff)
        self.b1 = model._bias(f"{prefix}.ffn.b1", d_ff)
        self.W2 = model._weight(f"{prefix}.ffn.W2", d_ff, d_model)
        self.b2 = model._bias(f"{prefix}.ffn.b2", d_model)
        self.norm2 = model._norm(f"{prefix}.norm2", d_model)

    def ffn(self, x: Tensor) -> Tensor:
        return ad.linear(ad.relu(ad.linear(x, self.W1, self.b1)), self.W2, self.b2)

    def __call__(self, x: Tensor, dropout: float, training: bool, rng) -> Tensor:
        h = ad.layer_norm(ad.add(x, ad.dropout(self.attn(x, dropout, training, rng), dropout, rng, training)), *self.norm1)
        return ad.layer_norm(ad.add(h, ad.dropout(self.ffn(h), dropout, rng, training)), *self.norm2)


# --------------------------------------------------------------------------- models


class Aceot(Model):
    """Positional encoding + ARMA graph filtering + encoder-only transformer + node head."""

    kind = "aceot"

    def __init__(self, config: AceotConfig, seed: int = 0):
        super().__init__(config, seed)
        c = config
        self.E = self._add(Parameter("pos.E", self._rng.normal(0.0, 0.02, (c.n_buses, c.h_c)), decay=False))
        self.proj = self._weight("input.proj", 2, c.h_c)
        self.arma = ArmaStack(self, "arma", c.h_c, c.h_c, c.arma_layers, c.stacks, c.iterations)
        self.to_model = self._weight("bridge.W", c.h_c, c.d_model)
        self.to_model_b = self._bias("bridge.b", c.d_model)
        self.encoder = [EncoderLayer(self, f"enc.{i}", c.d_model, c.d_ff, c.heads) for i in range(c.enc_layers)]
        self.head = self._weight("head.W", c.d_model, 1)
        self.head_b = self._bias("head.b", 1)

    def positional_encode(self, ids=None) -> Tensor:
        n = self.config.n_buses
        ids = np.arange(n) if ids is None else np.asarray(ids)
        if ids.shape != (n,):
            raise SizeMismatch(f"expected {n} bus ids, got shape {ids.shape}")
        return ad.embedding_lookup(self.E, ids)

    def input_embed(self, features) -> Tensor:
        x = ad.as_tensor(features)
        if x.shape[-1] != 2:
            raise ShapeMismatch(f"features must end in (P, Q), got {x.shape}")
        return ad.add(ad.matmul(x, self.proj), self.positional_encode())

    def encode(self, features, adj_norm, training: bool = False, rng=None) -> Tensor:
        """Encoder output (batch, n, d_model); the node embeddings used for export."""
        features = np.asarray(features, dtype=np.float64)
        self._check_input(features)
        c = self.config
        adj = ad.as_tensor(adj_norm)
        x = self.input_embed(features)
        x = self.arma(x, adj, c.dropout, training, rng)
        x = ad.linear(x, self.to_model, self.to_model_b)
        for layer in self.encoder:
            x = layer(x, c.dropout, training, rng)
        return x

    def forward(self, features, adj_norm, training: bool = False, rng=None) -> Tensor:
        x = self.encode(features, adj_norm, training, rng)
        logits = ad.linear(x, self.head, self.head_b)
        b, n, _ = logits.shape
        return ad.reshape(logits, (b, n))

    def attention_weights(self) -> list[np.ndarray]:
        return [layer.attn.last_weights for layer in self.encoder]


class ArmaOnly(Model):
    """Input projection, ARMA stack, per-node linear head."""

    kind = "arma"

    def __init__(self, config: AceotConfig, seed: int = 0):
        super().__init__(config, seed)
        c = config
        self.proj = self._weight("input.proj", 2, c.h_c)
        self.proj_b = self._bias("input.b", c.h_c)
        self.arma = ArmaStack(self, "arma", c.h_c, c.h_c, c.arma_layers, c.stacks, c.iterations)
        self.head = self._weight("head.W", c.h_c, 1)
        self.head_b = self._bias("head.b", 1)

    def encode(self, features, adj_norm, training: bool = False, rng=None) -> Tensor:
        features = np.asarray(features, dtype=np.float64)
        self._check_input(features)
        x = ad.linear(ad.as_tensor(features), self.proj, self.proj_b)
        return self.arma(x, ad.as_tensor(adj_norm), self.config.dropout, training, rng)

    def forward(self, features, adj_norm, training: bool = False, rng=None) -> Tensor:
        x = ad.linear(self.encode(features, adj_norm, training, rng), self.head, self.head_b)
        b, n, _ = x.shape
        return ad.reshape(x, (b, n))


class Mlp(Model):
    """Per-node ReLU network on (P, Q) shared across buses; ignores topology."""

    kind = "mlp"

    def __init__(self, config: AceotConfig, seed: int = 0):
        super().__init__(config, seed)
        c = config
        widths = [2] + [c.h_c] * (c.mlp_layers - 1) + [1]
        self.layers = [
            (self._weight(f"mlp.{i}.W", widths[i], widths[i + 1]), self._bias(f"mlp.{i}.b", widths[i + 1]))
            for i in range(c.mlp_layers)
        ]

    def encode(self, features, adj_norm=None, training: bool = False, rng=None) -> Tensor:
        features = np.asarray(features, dtype=np.float64)
        self._check_input(features)
        x = ad.as_tensor(features)
        for W, b in self.layers[:-1]:
            x = ad.dropout(ad.relu(ad.linear(x, W, b)), self.config.dropout, rng, training)
        return x

    def forward(self, features, adj_norm=None, training: bool = False, rng=None) -> Tensor:
        W, b = self.layers[-1]
        x = ad.linear(self.encode(features, adj_norm, training, rng), W, b)
        bsz, n, _ = x.shape
        return ad.reshape(x, (bsz, n))


_REGISTRY = {"aceot": Aceot, "arma": ArmaOnly, "mlp": Mlp}


def build_model(kind: str, config: AceotConfig, seed: int = 0) -> Model:
    try:
        cls = _REGISTRY[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}") from None
    return cls(config, seed)


def node_probabilities(model: Model, features, adj_norm, batch_size: int = 512) -> np.ndarray:
    """Eval-mode sigmoid outputs, (samples, n)."""
    out = []
    with ad.no_grad():
        for i in range(0, len(features), batch_size):
            logits = model.forward(features[i : i + batch_size], adj_norm, training=False)
            out.append(ad._sigmoid(logits.data))
    return np.concatenate(out) if out else np.zeros((0, model.config.n_buses))


def detect(node_probs) -> tuple[float, bool]:
    """Graph-level probability (max over buses) and the attack decision (> 0.5)."""
    p = float(np.max(node_probs)) if np.size(node_probs) else 0.0
    return p, p > 0.5
