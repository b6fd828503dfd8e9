"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op builds an output :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to per-parent gradients. Node ids come
from a single monotonically increasing counter, so a node's inputs always have
smaller ids than the node itself and :meth:`Tensor.backward` can simply visit
the reachable nodes in decreasing id order.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_next_id = itertools.count()
_grad_enabled = True

DEFAULT_LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


class NonDeterministicError(RuntimeError):
    pass


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "id", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise FloatingPointError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.id = next(_next_id)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def backward(self) -> None:
        backward(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def float32_grid(a: np.ndarray) -> np.ndarray:
    """Nearest float64 values that float32 represents exactly.

    Parameters live on this grid so 32-bit checkpoints store them losslessly.
    """
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.id = next(_next_id)
    out.name = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out.op = op
    if track:
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def leaky_relu(x: Tensor, slope: float = DEFAULT_LEAKY_SLOPE) -> Tensor:
    """Elementwise ``x if x >= 0 else slope * x``; the derivative at 0 is taken as 1."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky slope must lie in [0, 1), got {slope}")
    x = as_tensor(x)
    positive = x.data >= 0
    local = np.where(positive, 1.0, slope)
    return _make(x.data * local, (x,), lambda g: (g * local,), "leaky_relu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    x2 = x.data * x.data
    u = _GELU_C * x.data * (1.0 + 0.044715 * x2)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def grad_fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _make(out, (x,), grad_fn, "gelu")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched product over equal leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        return (
            np.matmul(g, np.swapaxes(b.data, -1, -2)),
            np.matmul(np.swapaxes(a.data, -1, -2), g),
        )

    return _make(out, (a, b), grad_fn, "matmul")


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """``x @ weight.T`` for weight of shape (d_out, d_in); x may have any leading dims."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T

    def grad_fn(g):
        g2 = g.reshape(-1, weight.shape[0])
        x2 = x.data.reshape(-1, weight.shape[1])
        return (g @ weight.data, g2.T @ x2)

    return _make(out, (x, weight), grad_fn, "linear")


# ---------------------------------------------------------------------------
# shape plumbing

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), grad_fn, "getitem")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range for table of {weight.shape[0]} rows")

    def grad_fn(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(weight.data[ids], (weight,), grad_fn, "embedding")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------------------
# normalisation and losses

def softmax(v: Tensor, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty tensor")
    z = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (v,), grad_fn, "softmax")


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    x, gain = as_tensor(x), as_tensor(gain)
    d = x.shape[-1]
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    normed = x.data * r

    def grad_fn(g):
        u = g * gain.data
        dx = r * u - (r**3) * x.data * (u * x.data).sum(axis=-1, keepdims=True) / d
        dgain = (g * normed).reshape(-1, d).sum(axis=0)
        return (dx, dgain)

    return _make(normed * gain.data, (x, gain), grad_fn, "rms_norm")


def cross_entropy(logits: Tensor, target, weights=None) -> Tensor:
    """Weighted negative log-likelihood of ``target`` under ``softmax(logits)``.

    A 1-D ``logits`` with an integer ``target`` gives the plain single-token
    loss. For 2-D logits, ``target`` holds one id per row and ``weights`` one
    non-negative weight per row (default: uniform mean); the result is
    ``sum_i weights[i] * nll[i]``.
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    if z.ndim != 2:
        raise ShapeError(f"cross_entropy expects 1-D or 2-D logits, got {logits.shape}")
    n, vocab = z.shape
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    if t.shape != (n,):
        raise ShapeError(f"expected {n} targets, got shape {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= vocab):
        raise IndexError(f"target id out of range for {vocab} classes")
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(n)

    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    sumexp = np.exp(shifted).sum(axis=1, keepdims=True)
    rows = np.arange(n)
    nll = np.log(sumexp[:, 0]) - shifted[rows, t]
    loss = np.asarray((w * nll).sum())

    def grad_fn(g):
        p = np.exp(shifted) / sumexp
        p[rows, t] -= 1.0
        grad = g * w[:, None] * p
        return (grad[0] if single else grad,)

    return _make(loss, (logits,), grad_fn, "cross_entropy")


# ---------------------------------------------------------------------------
# graph traversal

@dataclass
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    output: Tensor


@dataclass
class Graph:
    nodes: list[Node] = field(default_factory=list)

    @property
    def order(self) -> list[int]:
        return [node.id for node in self.nodes]


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.id in seen or not t.requires_grad:
            continue
        if t.op == "consumed":
            raise GradientError("graph was already consumed by a previous backward(); rebuild it")
        seen[t.id] = t
        stack.extend(t._parents)
    return sorted(seen.values(), key=lambda t: t.id)


def build_graph(root: Tensor) -> Graph:
    """The recorded graph feeding ``root``, in creation (topological) order."""
    return Graph([Node(t.id, t.op, tuple(p.id for p in t._parents), t) for t in _reachable(root)])


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor in the graph of a scalar ``loss``.

    Leaf gradients are never silently accumulated across calls: a leaf that
    still holds a gradient from an earlier backward raises, as does reusing a
    consumed graph.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.op == "consumed":
        raise GradientError("graph was already consumed by a previous backward(); rebuild it")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires grad")
    nodes = _reachable(loss)
    for t in nodes:
        if t._backward is None and t.grad is not None:
            raise GradientError(f"leaf {t!r} already has a gradient; call zero_grad() first")

    pending: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for t in reversed(nodes):
        g = pending.pop(t.id, None)
        if g is None:
            continue
        t.grad = g
        if t._backward is None:
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in pending:
                pending[parent.id] = pending[parent.id] + pg
            else:
                pending[parent.id] = pg

    for t in nodes:
        if t._backward is not None:
            t._backward = None
            t._parents = ()
            t.op = "consumed"


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference oracle

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    flagged: dict[str, list[tuple[int, ...]]]
    tol: float

    @property
    def passed(self) -> bool:
        return not any(self.flagged.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    The error for a parameter tensor is ``max|analytic - numeric|`` divided by
    the largest gradient magnitude in that tensor (either route), so entries
    whose true gradient is zero are judged against the tensor's own scale.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    named = dict(params) if isinstance(params, dict) else {f"p{i}": p for i, p in enumerate(params)}

    with no_grad():
        first, second = f().data.copy(), f().data.copy()
    if not np.array_equal(first, second):
        raise NonDeterministicError("two forward passes with identical parameters disagree")

    flags = {k: p.requires_grad for k, p in named.items()}
    for p in named.values():
        p.requires_grad = True
        p.grad = None
    try:
        backward(f())
        analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in named.items()}
    finally:
        for k, p in named.items():
            p.grad = None
            p.requires_grad = flags[k]

    errors: dict[str, float] = {}
    flagged: dict[str, list[tuple[int, ...]]] = {}
    with no_grad():
        for key, p in named.items():
            numeric = np.zeros_like(p.data)
            for idx in np.ndindex(p.shape):
                orig = p.data[idx]
                p.data[idx] = orig + eps
                up = float(f().data)
                p.data[idx] = orig - eps
                down = float(f().data)
                p.data[idx] = orig
                numeric[idx] = (up - down) / (2 * eps)
            diff = np.abs(analytic[key] - numeric)
            scale = max(np.abs(analytic[key]).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-300)
            errors[key] = float(diff.max(initial=0.0) / scale)
            flagged[key] = [tuple(int(i) for i in ix) for ix in np.argwhere(diff > tol * scale)]
    return GradCheckReport(errors, flagged, tol)
