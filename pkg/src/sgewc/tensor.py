"""Minimal reverse-mode autodiff over dense float64 matrices.

Only what an MLP GAN needs: 2-D tensors, a row-vector bias broadcast,
matmul, a handful of elementwise ops, column concatenation and reductions.

Gradients accumulate (``+=``) into ``Tensor.grad`` on leaves; callers zero
them explicitly. A graph can be backpropagated once; a second ``backward``
on the same root raises.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

LOG_EPS = 1e-8


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple["Tensor", ...], backward: Callable):
        self.op = op
        self.parents = parents
        # backward(grad_out) -> tuple of parent grads (None where not needed)
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "node", "requires_grad", "name", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"only 0-, 1- and 2-D tensors are supported, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._consumed = False

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out.node = _Node(op, tuple(parents), backward) if out.requires_grad else None
        out.name = None
        out._consumed = False
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        op = f" op={self.node.op}" if self.node else ""
        return f"Tensor(shape={self.shape}{tag}{op})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _require_2d(t: Tensor, op: str) -> None:
    if t.data.ndim != 2:
        raise ShapeError(f"{op} expects a 2-D tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return Tensor._from_op(A @ B, "matmul", (a, b), backward)


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if a.data.ndim == 2 and b.data.ndim == 2 and b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        return "row_b"
    if a.data.ndim == 2 and b.data.ndim == 2 and a.shape[0] == 1 and a.shape[1] == b.shape[1]:
        return "row_a"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    if (kind == "row_b" and side == "b") or (kind == "row_a" and side == "a"):
        return g.sum(axis=0, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "add")

    def backward(g):
        return (
            _unbroadcast(g, kind, "a") if a.requires_grad else None,
            _unbroadcast(g, kind, "b") if b.requires_grad else None,
        )

    return Tensor._from_op(a.data + b.data, "add", (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "sub")

    def backward(g):
        return (
            _unbroadcast(g, kind, "a") if a.requires_grad else None,
            -_unbroadcast(g, kind, "b") if b.requires_grad else None,
        )

    return Tensor._from_op(a.data - b.data, "sub", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "mul")
    A, B = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * B, kind, "a") if a.requires_grad else None,
            _unbroadcast(g * A, kind, "b") if b.requires_grad else None,
        )

    return Tensor._from_op(A * B, "mul", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(a.data * c, "scale", (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, "neg", (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    A = a.data
    return Tensor._from_op(A * A, "square", (a,), lambda g: (2.0 * A * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow in exp for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor._from_op(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def log(a: Tensor, eps: float = LOG_EPS) -> Tensor:
    """``log(max(a, eps))``; the gradient is zero where the clamp is active."""
    A = a.data
    active = A > eps
    clamped = np.where(active, A, eps)

    def backward(g):
        return (np.where(active, g / clamped, 0.0),)

    return Tensor._from_op(np.log(clamped), "log", (a,), backward)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, "concat_cols")
    _require_2d(b, "concat_cols")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols row counts differ: {a.shape} vs {b.shape}")
    p = a.shape[1]

    def backward(g):
        return (g[:, :p] if a.requires_grad else None, g[:, p:] if b.requires_grad else None)

    return Tensor._from_op(np.concatenate([a.data, b.data], axis=1), "concat_cols", (a, b), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    shape = a.data.shape
    return Tensor._from_op(np.array(a.data.mean()), "mean_all", (a,), lambda g: (np.full(shape, g / n),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return Tensor._from_op(np.array(a.data.sum()), "sum_all", (a,), lambda g: (np.full(shape, g),))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax of ``logits``."""
    _require_2d(logits, "softmax_cross_entropy")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    n = len(labels)

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return Tensor._from_op(np.array(-logp[rows, labels].mean()), "softmax_xent", (logits,), backward)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
    return order  # parents before children


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Return dloss/dw for each ``w`` in ``wrt`` without touching ``.grad``.

    Unreachable tensors get zeros. Pure function of the graph, so it may be
    called concurrently on graphs that share leaves.
    """
    if loss.data.size != 1:
        raise ShapeError(f"gradient root must be scalar, got shape {loss.shape}")
    targets = {id(w) for w in wrt}
    order = _topo_order(loss)
    # only propagate into nodes that lead to a requested leaf
    needed: set[int] = set()
    for t in order:
        if id(t) in targets or (t.node is not None and any(id(p) in needed for p in t.node.parents)):
            needed.add(id(t))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.get(id(t))
        if g is None or t.node is None or id(t) not in needed:
            continue
        for p, pg in zip(t.node.parents, t.node.backward(g)):
            if pg is None or id(p) not in needed:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return [grads.get(id(w), np.zeros_like(w.data)).reshape(w.shape) for w in wrt]


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate dloss/dparam into ``param.grad``.

    With ``params=None`` every reachable leaf that requires grad is updated.
    Listed params that are unreachable still receive a (zero) grad buffer.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph; rebuild the loss before calling it again")
    if params is None:
        params = [t for t in _topo_order(loss) if t.node is None and t.requires_grad]
    params = list(params)
    for p, g in zip(params, grad(loss, params)):
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        p.grad += g
    loss._consumed = True
