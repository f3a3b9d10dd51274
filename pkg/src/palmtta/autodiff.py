"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Only the primitives needed for small feed-forward classifiers with batch
normalization are provided. Every op checks its output for NaN/Inf and
raises :class:`NonFiniteError` naming the op, so a diverging run fails loudly
instead of silently propagating garbage.

Example
-------
>>> w = Tensor([[1.0], [2.0]], requires_grad=True)
>>> x = Tensor([[3.0, 4.0]])
>>> loss = mean(matmul(x, w))
>>> backward(loss)
>>> w.grad.ravel().tolist()
[3.0, 4.0]
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError",
    "backward", "matmul", "add_bias", "relu", "batchnorm", "softmax",
    "log_softmax", "log", "scale", "mul", "add", "mean", "sum",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""

    def __init__(self, op: str, a: tuple, b: tuple):
        super().__init__(f"{op}: incompatible shapes {a} and {b}")
        self.op = op
        self.shapes = (a, b)


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""

    def __init__(self, op: str):
        super().__init__(f"{op}: produced non-finite values")
        self.op = op


class Tensor:
    """Dense array plus an optional gradient buffer.

    Leaf tensors created with ``requires_grad=True`` accumulate gradients in
    ``grad`` on every :func:`backward` call. Intermediate results never keep
    a ``grad``; their gradients live only for the duration of one pass.
    """

    __slots__ = ("values", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, *, op: str = "leaf",
                 parents: Sequence["Tensor"] = (), backward_fn: Callable | None = None):
        values = np.array(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise NonFiniteError(op)
        self.values = values
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward_fn

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(op: str, values: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    tracked = any(p.requires_grad for p in parents)
    if not tracked:
        # constant subgraph, nothing to record
        return Tensor(values, op=op)
    return Tensor(values, requires_grad=True, op=op, parents=parents, backward_fn=backward_fn)


class Tape:
    """Ordered record of the ops reachable from a root, in topological order."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        # iterative DFS; nets are shallow but recursion limits are not worth the risk
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    if root.values.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    tape = Tape(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.values)
            node.grad += g
            continue
        with np.errstate(over="ignore", invalid="ignore"):
            parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NonFiniteError(f"{node.op} (backward)")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.values, b.values

    def grad_fn(g):
        return g @ bv.T, av.T @ g

    return _node("matmul", av @ bv, (a, b), grad_fn)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    x, b = _as_tensor(x), _as_tensor(b)
    if x.values.ndim != 2 or b.values.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError("add_bias", x.shape, b.shape)

    def grad_fn(g):
        return g, g.sum(axis=0)

    return _node("add_bias", x.values + b.values, (x, b), grad_fn)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.values > 0

    def grad_fn(g):
        return (g * mask,)

    return _node("relu", np.where(mask, x.values, 0.0), (x,), grad_fn)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, *, mean: np.ndarray | None = None,
              var: np.ndarray | None = None, eps: float = 1e-5) -> Tensor:
    """Per-feature normalization of a (batch, features) block.

    With ``mean``/``var`` omitted the current batch statistics are used and
    differentiated through; otherwise the supplied statistics are constants.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.values.ndim != 2 or gamma.shape != (x.shape[1],):
        raise ShapeError("batchnorm", x.shape, gamma.shape)
    if beta.shape != gamma.shape:
        raise ShapeError("batchnorm", gamma.shape, beta.shape)
    use_batch = mean is None
    if use_batch:
        if x.shape[0] < 2:
            raise ValueError(f"batchnorm: batch statistics need batch >= 2, got {x.shape[0]}")
        mean = x.values.mean(axis=0)
        var = x.values.var(axis=0)
    elif var is None:
        raise ValueError("batchnorm: mean given without var")
    inv_std = 1.0 / np.sqrt(np.asarray(var) + eps)
    xhat = (x.values - mean) * inv_std
    gv = gamma.values
    out = gv * xhat + beta.values
    n = x.shape[0]

    def grad_fn(g):
        dxhat = g * gv
        if use_batch:
            dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _node("batchnorm", out, (x, gamma, beta), grad_fn)


def _check_rows(op: str, x: Tensor) -> None:
    if x.values.ndim != 2:
        raise ShapeError(op, x.shape, ("batch", "classes"))


def softmax(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    _check_rows("softmax", x)
    z = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _node("softmax", s, (x,), grad_fn)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax in fused log-sum-exp form (never takes log of 0)."""
    x = _as_tensor(x)
    _check_rows("log_softmax", x)
    z = x.values - x.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def grad_fn(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return _node("log_softmax", out, (x,), grad_fn)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.values)
    xv = x.values

    def grad_fn(g):
        return (g / xv,)

    return _node("log", out, (x,), grad_fn)


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)

    def grad_fn(g):
        return (g * c,)

    return _node("scale", x.values * c, (x,), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    av, bv = a.values, b.values

    def grad_fn(g):
        return g * bv, g * av

    return _node("mul", av * bv, (a, b), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)

    def grad_fn(g):
        return g, g

    return _node("add", a.values + b.values, (a, b), grad_fn)


def mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.values.size
    shape = x.shape

    def grad_fn(g):
        return (np.full(shape, float(g) / n),)

    return _node("mean", np.asarray(x.values.mean()), (x,), grad_fn)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = _as_tensor(x)
    shape = x.shape
    if axis is None:
        def grad_fn(g):
            return (np.full(shape, float(g)),)
        return _node("sum", np.asarray(x.values.sum()), (x,), grad_fn)
    if x.values.ndim != 2 or axis not in (0, 1):
        raise ShapeError("sum", x.shape, (axis,))

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node("sum", x.values.sum(axis=axis), (x,), grad_fn)
