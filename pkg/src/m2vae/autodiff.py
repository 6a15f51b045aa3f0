"""Small reverse-mode autodiff over float64 numpy arrays.

Nodes are recorded on the active :class:`Tape` in creation order, which is a
topological order by construction. Leaves (parameters, inputs) are never on
the tape; their gradients are what :func:`backward` returns.

    with Tape() as tape:
        y = (w @ x).tanh().sum()
    grads = backward(tape, y, {"w": w})
"""
from __future__ import annotations

import threading
from typing import Callable, Mapping, Sequence

import numpy as np

from . import distributions as D

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "grad_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.grad_fn: Callable | None = None
        self.op = "leaf"

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return mul(sum_(self, axis), 1.0 / n)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite value produced by {op}")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.grad_fn = grad_fn
        out.op = op
        tape = _active_tape()
        if tape is not None:
            tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# -- primitives --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul takes 2-D operands")
    return _make("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(a.data.sum(axis=axis)), (a,), grad_fn)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _make("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _make("concat", np.concatenate([p.data for p in parts], axis=axis), parts,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# Distribution closed forms as fused primitives; each reduces over the last axis.

def gaussian_kl(mu1, lv1, mu2, lv2) -> Tensor:
    mu1, lv1, mu2, lv2 = map(as_tensor, (mu1, lv1, mu2, lv2))
    v1, v2 = np.exp(lv1.data), np.exp(lv2.data)
    d = mu1.data - mu2.data

    def grad_fn(g):
        g = g[..., None]
        return (g * d / v2,
                g * (0.5 * v1 / v2 - 0.5),
                -g * d / v2,
                g * (0.5 - (v1 + d * d) / (2.0 * v2)))

    return _make("gaussian_kl", D.kl_diag(mu1.data, lv1.data, mu2.data, lv2.data),
                 (mu1, lv1, mu2, lv2), grad_fn)


def kl_standard(mu, lv) -> Tensor:
    mu, lv = as_tensor(mu), as_tensor(lv)

    def grad_fn(g):
        g = g[..., None]
        return g * mu.data, g * 0.5 * (np.exp(lv.data) - 1.0)

    return _make("kl_standard", D.kl_diag_standard(mu.data, lv.data), (mu, lv), grad_fn)


def gaussian_log_prob(x, mu, lv) -> Tensor:
    x, mu, lv = map(as_tensor, (x, mu, lv))
    r = x.data - mu.data
    inv_v = np.exp(-lv.data)

    def grad_fn(g):
        g = g[..., None]
        return -g * r * inv_v, g * r * inv_v, g * (0.5 * r * r * inv_v - 0.5)

    return _make("gaussian_log_prob", D.gaussian_log_density(x.data, mu.data, lv.data),
                 (x, mu, lv), grad_fn)


def bernoulli_log_prob(x, logits) -> Tensor:
    x, logits = as_tensor(x), as_tensor(logits)
    p = 0.5 * (1.0 + np.tanh(0.5 * logits.data))

    def grad_fn(g):
        g = g[..., None]
        return g * logits.data, g * (x.data - p)

    return _make("bernoulli_log_prob", D.bernoulli_log_density(x.data, logits.data), (x, logits), grad_fn)


# -- reverse pass ------------------------------------------------------------

def backward(tape: Tape, out: Tensor, wrt: Mapping[str, Tensor] | None = None):
    """Reverse-mode gradients of scalar ``out``.

    Returns ``{name: grad}`` for the leaves in ``wrt`` (zeros where no path
    exists), or ``{leaf_tensor: grad}`` for every reached leaf if ``wrt`` is None.
    """
    if out.data.size != 1:
        raise ValueError("backward needs a scalar output")
    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
    leaves: dict[int, Tensor] = {}
    if not out.grad_fn:
        leaves[id(out)] = out
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
            if parent.grad_fn is None:
                leaves[key] = parent
    if wrt is None:
        return {leaves[k]: grads[k] for k in leaves if k in grads}
    return {name: grads.get(id(t), np.zeros_like(t.data)).reshape(t.shape) for name, t in wrt.items()}
