"""Reverse-mode automatic differentiation over small dense computation graphs.

Nodes hold float64 numpy arrays of rank <= 2. Graphs are built per loss
evaluation and discarded; gradient accumulation follows a fixed topological
order so repeated runs are bit-identical.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericalError

_DEBUG_FINITE = bool(os.environ.get("PREFIXRL_DEBUG_FINITE"))


def set_debug_finite(enabled: bool) -> None:
    """Toggle per-node finiteness checks (release builds check only the root)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


# ---------------------------------------------------------------------------
# numerically stable scalar/array primitives (shared by graph ops and callers)
# ---------------------------------------------------------------------------

def sigmoid_np(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid_np(x):
    # log sigmoid(x) = -log(1 + e^{-x}); split by sign to avoid overflow
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = -np.log1p(np.exp(-x[pos]))
    out[~pos] = x[~pos] - np.log1p(np.exp(x[~pos]))
    return out


def log_softmax_np(scores):
    scores = np.asarray(scores, dtype=np.float64)
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def logit_np(p):
    """Inverse sigmoid. Raises DomainError at 0 or 1; callers clamp first."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise DomainError("logit requires inputs strictly inside (0, 1)")
    out = np.log(p) - np.log1p(-p)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# graph values
# ---------------------------------------------------------------------------

class Tensor:
    """A node in the computation graph: a value plus how to pull gradients back."""

    __slots__ = ("data", "parents", "vjps", "requires_grad", "grad")

    def __init__(self, data, parents=(), vjps=(), requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ContractError(f"rank-{arr.ndim} arrays unsupported (max 2)")
        self.data = arr
        self.parents: tuple[Tensor, ...] = parents
        self.vjps: tuple[Callable, ...] = vjps
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        if _DEBUG_FINITE and not np.all(np.isfinite(arr)):
            raise NumericalError("non-finite value produced in graph")

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar of shape {self.data.shape}")
        return float(self.data.reshape(()))

    # -- operator sugar ----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data)


def leaf(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _node(data, parents, vjps) -> Tensor:
    needed = tuple(p.requires_grad for p in parents)
    if not any(needed):
        return Tensor(data)
    return Tensor(data, parents=parents, vjps=vjps)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.data.shape),
                  lambda g: _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 (lambda g: _unbroadcast(g, a.data.shape),
                  lambda g: _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 (lambda g: _unbroadcast(g * b.data, a.data.shape),
                  lambda g: _unbroadcast(g * a.data, b.data.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data / b.data, (a, b),
                 (lambda g: _unbroadcast(g / b.data, a.data.shape),
                  lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data @ b.data, (a, b),
                 (lambda g: g @ b.data.T,
                  lambda g: a.data.T @ g))


def pow_const(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data ** exponent, (a,),
                 (lambda g: g * exponent * a.data ** (exponent - 1),))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), (lambda g: g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), (lambda g: g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = sigmoid_np(a.data)
    return _node(out, (a,), (lambda g: g * out * (1.0 - out),))


def log_sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # d/dx log sigmoid(x) = sigmoid(-x)
    return _node(log_sigmoid_np(a.data), (a,), (lambda g: g * sigmoid_np(-a.data),))


def log_softmax(a) -> Tensor:
    """Row-wise log-softmax over the last axis."""
    a = as_tensor(a)
    out = log_softmax_np(a.data)
    probs = np.exp(out)

    def vjp(g):
        return g - probs * np.sum(g, axis=-1, keepdims=True)

    return _node(out, (a,), (vjp,))


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------

def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy()

    return _node(out, (a,), (vjp,))


def tmean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _node(np.mean(a.data), (a,),
                 (lambda g: np.broadcast_to(g / n, a.data.shape).copy(),))


def cumsum(a, axis=0) -> Tensor:
    a = as_tensor(a)
    out = np.cumsum(a.data, axis=axis)

    def vjp(g):
        return np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

    return _node(out, (a,), (vjp,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,),
                 (lambda g: g.reshape(a.data.shape),))


def concat(parts: Sequence, axis=0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=axis)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _node(out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


def take(a, key) -> Tensor:
    """Basic/advanced indexing with scatter-add backward."""
    a = as_tensor(a)
    out = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return full

    return _node(out, (a,), (vjp,))


def gather_rows(a, idx) -> Tensor:
    """Select rows of a 2-d array; used for embedding lookups."""
    idx = np.asarray(idx, dtype=np.intp)
    return take(a, idx)


def take_per_row(a, cols) -> Tensor:
    """out[i] = a[i, cols[i]]; used to pick the emitted token's log-prob."""
    a = as_tensor(a)
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(a.data.shape[0])
    return take(a, (rows, cols))


# ---------------------------------------------------------------------------
# piecewise-linear ops
# ---------------------------------------------------------------------------

def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    return _node(np.minimum(a.data, b.data), (a, b),
                 (lambda g: _unbroadcast(g * pick_a, a.data.shape),
                  lambda g: _unbroadcast(g * ~pick_a, b.data.shape)))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    return _node(np.maximum(a.data, b.data), (a, b),
                 (lambda g: _unbroadcast(g * pick_a, a.data.shape),
                  lambda g: _unbroadcast(g * ~pick_a, b.data.shape)))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), (lambda g: g * inside,))


def stop_gradient(a) -> Tensor:
    """Forward value unchanged (same array), gradient exactly zero."""
    a = as_tensor(a)
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate gradients into .grad of every reachable requires_grad node."""
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.data.shape}")
    order = _topo_order(root)
    for node in order:
        node.grad = np.zeros_like(node.data)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if not node.vjps:
            continue
        g = node.grad
        for parent, vjp in zip(node.parents, node.vjps):
            if parent.requires_grad:
                parent.grad += vjp(g)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamVector:
    """Named float64 segments (embedding / hidden / output) forming one flat vector."""

    def __init__(self, segments: dict[str, np.ndarray], check: bool = True):
        self.segments = {k: np.asarray(v, dtype=np.float64) for k, v in segments.items()}
        if check:
            for name, arr in self.segments.items():
                if not np.all(np.isfinite(arr)):
                    raise NumericalError(f"non-finite entries in segment {name!r}")

    def names(self) -> list[str]:
        return list(self.segments)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.segments.values())

    def copy(self) -> "ParamVector":
        return ParamVector({k: v.copy() for k, v in self.segments.items()}, check=False)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.segments.values()])

    def replace_flat(self, vec: np.ndarray) -> "ParamVector":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ContractError(f"flat vector has {vec.size} entries, expected {self.size}")
        out, i = {}, 0
        for name, arr in self.segments.items():
            out[name] = vec[i:i + arr.size].reshape(arr.shape).copy()
            i += arr.size
        return ParamVector(out, check=False)

    def zeros_like(self) -> "ParamVector":
        return ParamVector({k: np.zeros_like(v) for k, v in self.segments.items()}, check=False)

    def axpy(self, alpha: float, other: "ParamVector") -> "ParamVector":
        """self + alpha * other, as a new vector (used for SGD steps)."""
        return ParamVector(
            {k: self.segments[k] + alpha * other.segments[k] for k in self.segments})

    def allclose(self, other: "ParamVector", atol=0.0, rtol=0.0) -> bool:
        return all(np.allclose(self.segments[k], other.segments[k], atol=atol, rtol=rtol)
                   for k in self.segments)


def eval_with_grad(loss_builder: Callable[[dict[str, Tensor]], Tensor],
                   params: ParamVector) -> tuple[float, ParamVector]:
    """Evaluate a scalar loss and its exact gradient for every parameter entry.

    `loss_builder` receives one leaf Tensor per parameter segment and must
    return a single scalar node.
    """
    leaves = {name: leaf(arr) for name, arr in params.segments.items()}
    root = loss_builder(leaves)
    if not isinstance(root, Tensor) or root.data.size != 1:
        raise ContractError("loss builder must produce a single scalar node")
    value = root.item()
    if not np.isfinite(value):
        raise NumericalError(f"non-finite forward value {value!r}")
    backward(root)
    grads = {name: (leaves[name].grad if leaves[name].grad is not None
                    else np.zeros_like(params.segments[name]))
             for name in params.segments}
    return value, ParamVector(grads, check=False)
