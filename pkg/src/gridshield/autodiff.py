"""Dense float64 tensors with reverse-mode differentiation.

Every primitive records its parents and a backward closure on the output
tensor. Tensors get a strictly increasing sequence number at creation, so
sorting the reachable nodes by that number yields the execution tape; walking
it backwards visits each node once, after all of its consumers.

Broadcasting is limited to leading-axis expansion: an operand's shape must be
a suffix of the other's. Anything else raises ShapeMismatch.
"""

from __future__ import annotations

import contextlib
import hashlib
import itertools
import json
import os
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ChecksumMismatch, IndexOutOfRange, NotScalarLoss, SchemaMismatch, ShapeMismatch

_seq = itertools.count()
_grad_enabled = True
CHECK_FINITE = bool(os.environ.get("GRIDSHIELD_DEBUG"))

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._seq = next(_seq)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """Trainable leaf with a persistent gradient buffer."""

    __slots__ = ("name", "decay")

    def __init__(self, name: str, value, decay: bool = True):
        super().__init__(np.array(value, dtype=np.float64, copy=True), requires_grad=True)
        self.name = name
        self.decay = decay
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {op}")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    out.op = op
    return out


def _check_suffix(a: tuple[int, ...], b: tuple[int, ...], what: str) -> tuple[int, ...]:
    """Return the broadcast shape when one shape is a suffix of the other."""
    long, short = (a, b) if len(a) >= len(b) else (b, a)
    if long[len(long) - len(short) :] != short:
        raise ShapeMismatch(f"{what}: shapes {a} and {b} are not leading-axis compatible")
    return long


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# --------------------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return _node(out, (x,), lambda g: (g * (out > 0),), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


# --------------------------------------------------------------------------- shape ops


def _fold_right(x: np.ndarray) -> np.ndarray:
    """(..., n, c) -> (n, prod(...) * c) so a shared (m, n) operator is one GEMM."""
    return np.moveaxis(x, -2, 0).reshape(x.shape[-2], -1)


def _unfold_right(y: np.ndarray, like_shape: tuple[int, ...]) -> np.ndarray:
    lead = like_shape[:-2]
    return np.moveaxis(y.reshape((y.shape[0],) + lead + like_shape[-1:]), 0, -2)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _check_suffix(a.shape[:-2], b.shape[:-2], "matmul batch")
    ad, bd = a.data, b.data

    if bd.ndim == 2 and ad.ndim > 2:
        # batched activations times a weight matrix
        k, p = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (p,))

        def backward(g):
            g2 = g.reshape(-1, p)
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

    elif ad.ndim == 2 and bd.ndim > 2:
        # shared operator (e.g. graph adjacency) applied to every batch element
        bf = _fold_right(bd)
        out_shape = bd.shape[:-2] + (ad.shape[0], bd.shape[-1])
        out = _unfold_right(ad @ bf, out_shape)

        def backward(g):
            gf = _fold_right(g)
            return gf @ bf.T, _unfold_right(ad.T @ gf, bd.shape)

    else:
        out = ad @ bd

        def backward(g):
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
            return ga, gb

    return _node(out, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeMismatch("transpose needs at least two axes")
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _node(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


# --------------------------------------------------------------------------- fused layers


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexOutOfRange(f"embedding ids must lie in [0, {n})")
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _node(table.data[ids], (table,), backward, "embedding")


def bce_with_logits(logits: Tensor, targets, pos_weight: float = 1.0) -> Tensor:
    """Mean of pw*y*softplus(-x) + (1-y)*softplus(x) over all elements."""
    y = np.asarray(targets, dtype=np.float64)
    x = logits.data
    if y.shape != x.shape:
        raise ShapeMismatch(f"bce_with_logits: logits {x.shape} vs targets {y.shape}")
    loss = pos_weight * y * np.logaddexp(0.0, -x) + (1.0 - y) * np.logaddexp(0.0, x)
    n = x.size
    s = _sigmoid(x)

    def backward(g):
        return (float(g) * (pos_weight * y * (s - 1.0) + (1.0 - y) * s) / n,)

    return _node(np.asarray(loss.mean()), (logits,), backward, "bce_with_logits")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


# --------------------------------------------------------------------------- backward


def tape_of(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` that need gradients, in execution order."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d p into ``p.grad`` for every Parameter p in the graph."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise NotScalarLoss(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(tape_of(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
            continue
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            k = id(parent)
            grads[k] = grads[k] + pg if k in grads else pg


# --------------------------------------------------------------------------- checkpoints

_MAGIC = b"GSCKPT1\n"


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path, params: Iterable[Parameter], meta: dict) -> None:
    """JSON header (names, shapes, meta, payload SHA-256) followed by little-endian float64 data."""
    params = list(params)
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in params)
    header = dict(meta)
    header["params"] = [{"name": p.name, "shape": list(p.shape), "decay": p.decay} for p in params]
    header["sha256"] = hashlib.sha256(payload).hexdigest()
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(payload)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(_MAGIC):
        raise SchemaMismatch(f"{path} is not a checkpoint file")
    off = len(_MAGIC)
    (hlen,) = struct.unpack("<Q", blob[off : off + 8])
    header = json.loads(blob[off + 8 : off + 8 + hlen])
    payload = blob[off + 8 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise ChecksumMismatch(f"{path}: payload checksum does not match header")
    arrays = {}
    pos = 0
    for spec in header["params"]:
        size = int(np.prod(spec["shape"], dtype=np.int64))
        arrays[spec["name"]] = np.frombuffer(payload, dtype="<f8", count=size, offset=pos * 8).reshape(spec["shape"]).copy()
        pos += size
    if pos * 8 != len(payload):
        raise SchemaMismatch(f"{path}: payload length does not match declared shapes")
    return header, arrays
