"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable kernel returns a new :class:`Tensor` carrying a
:class:`Node` that records its inputs and a local backward rule.
:func:`backward` traces the graph below a scalar root into a
:class:`ComputationTape` (topologically ordered records) and replays it in
reverse, applying the chain rule once per edge.

Binary kernels broadcast with numpy rules; gradients flowing back into a
broadcast operand are summed over the broadcast axes. Every tensor is
checked for NaN/Inf on construction so bad values are caught at the kernel
that produced them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import special
from .errors import DomainError, NonFiniteError, ShapeError

EXP_CLAMP = 15.0


class Node:
    """Parent-operation record attached to a non-leaf tensor."""

    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _node: Node | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if _node is None and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"NaN/Inf in input tensor of shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node = _node
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        op = f" op={self.node.op}" if self.node else ""
        return f"Tensor(shape={self.shape}{label}{op})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"NaN/Inf produced by {op} (output shape {data.shape})")
    needs = any(t.requires_grad for t in inputs)
    node = Node(op, tuple(inputs), backward) if needs else None
    return Tensor(data, requires_grad=needs, _node=node)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# elementwise binary kernels


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("div: zero in denominator")
    q = a.data / b.data

    def back(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * q / b.data, b.shape)

    return _result("div", q, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar."""
    c = float(c)

    def back(g):
        return (g * c,)

    return _result("scale", a.data * c, (a,), back)


# ---------------------------------------------------------------------------
# matrix kernels


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", a.data @ b.data, (a, b), back)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")

    def back(g):
        return (g.T,)

    return _result("transpose", a.data.T, (a,), back)


def leading_slice(a: Tensor, sizes: Sequence[int]) -> Tensor:
    """The leading ``sizes[i]`` entries along each axis, as a view.

    Gradients on the slice scatter back into the full-size operand.
    """
    if len(sizes) != a.data.ndim or any(not 0 < s <= n for s, n in zip(sizes, a.shape)):
        raise ShapeError(f"leading_slice: sizes {tuple(sizes)} invalid for shape {a.shape}")
    index = tuple(slice(0, int(s)) for s in sizes)
    if tuple(sizes) == a.shape:
        return a

    def back(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return _result("leading_slice", a.data[index], (a,), back)


def gather_rows(a: Tensor, cols) -> Tensor:
    """out[i] = a[i, cols[i]] for a 2-D tensor."""
    cols = np.asarray(cols, dtype=np.int64)
    if a.data.ndim != 2 or cols.shape != (a.shape[0],):
        raise ShapeError(f"gather_rows: index shape {cols.shape} does not match tensor shape {a.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= a.shape[1]):
        raise ShapeError(f"gather_rows: column index out of range for shape {a.shape}")
    rows = np.arange(a.shape[0])

    def back(g):
        full = np.zeros(a.shape)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _result("gather_rows", a.data[rows, cols], (a,), back)


# ---------------------------------------------------------------------------
# elementwise unary kernels


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def back(g):
        return (g * mask,)

    return _result("relu", np.where(mask, a.data, 0.0), (a,), back)


def exp(a: Tensor) -> Tensor:
    """exp of the input clamped to [-EXP_CLAMP, EXP_CLAMP]; zero gradient outside the window."""
    inside = np.abs(a.data) <= EXP_CLAMP
    y = np.exp(np.clip(a.data, -EXP_CLAMP, EXP_CLAMP))

    def back(g):
        return (g * y * inside,)

    return _result("exp", y, (a,), back)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log: argument must be > 0")

    def back(g):
        return (g / a.data,)

    return _result("log", np.log(a.data), (a,), back)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("sqrt: argument must be > 0 (a zero argument has no derivative)")
    y = np.sqrt(a.data)

    def back(g):
        return (g * 0.5 / y,)

    return _result("sqrt", y, (a,), back)


def digamma(a: Tensor) -> Tensor:
    def back(g):
        return (g * special.trigamma(a.data),)

    return _result("digamma", special.digamma(a.data), (a,), back)


def lgamma(a: Tensor) -> Tensor:
    def back(g):
        return (g * special.digamma(a.data),)

    return _result("lgamma", special.lgamma(a.data), (a,), back)


# ---------------------------------------------------------------------------
# reductions and row-wise kernels


def _check_axis(op: str, a: Tensor, axis):
    if axis is not None and not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {a.shape}")


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    _check_axis("sum", a, axis)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    _check_axis("mean", a, axis)
    n = a.data.size if axis is None else a.shape[axis]

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), back)


def _require_matrix(op: str, a: Tensor):
    if a.data.ndim != 2:
        raise ShapeError(f"{op}: expected a matrix, got shape {a.shape}")


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    _require_matrix("l2_normalize_rows", a)
    norms = np.maximum(np.sqrt((a.data * a.data).sum(axis=1, keepdims=True)), eps)
    y = a.data / norms

    def back(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)

    return _result("l2_normalize_rows", y, (a,), back)


def softmax_rows(a: Tensor) -> Tensor:
    _require_matrix("softmax_rows", a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result("softmax_rows", y, (a,), back)


def log_softmax_rows(a: Tensor) -> Tensor:
    _require_matrix("log_softmax_rows", a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def back(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _result("log_softmax_rows", y, (a,), back)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean=None, var=None, eps: float = 1e-5):
    """Per-column normalisation of a [batch, channels] matrix.

    With ``mean``/``var`` omitted the batch statistics are used and the
    returned tuple carries them (biased variance) for running-stat updates;
    otherwise the supplied fixed statistics are treated as constants.
    """
    _require_matrix("batch_norm", x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: parameter shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    use_batch = mean is None
    if use_batch:
        mu = x.data.mean(axis=0)
        v = x.data.var(axis=0)
    else:
        mu = np.asarray(mean, dtype=np.float64)
        v = np.asarray(var, dtype=np.float64)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - mu) * inv
    n = x.shape[0]

    def back(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        if use_batch:
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    out = _result("batch_norm", xhat * gamma.data + beta.data, (x, gamma, beta), back)
    return out, mu, v


# ---------------------------------------------------------------------------
# tape and backward pass


@dataclass
class TapeRecord:
    output: Tensor
    node: Node


class ComputationTape:
    """Topologically ordered operation records below one root tensor."""

    def __init__(self, root: Tensor, records: list[TapeRecord]):
        self.root = root
        self.records = records

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationTape":
        order: list[TapeRecord] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node is None:
                continue
            if expanded:
                order.append(TapeRecord(t, t.node))
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            stack.append((t, True))
            for inp in reversed(t.node.inputs):
                if inp.node is not None and id(inp) not in visited:
                    stack.append((inp, False))
        return cls(root, order)

    def replay(self, seed_grad: float = 1.0) -> None:
        grads: dict[int, np.ndarray] = {id(self.root): np.full(self.root.shape, seed_grad)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            local = rec.node.backward(g)
            for inp, gi in zip(rec.node.inputs, local):
                if not inp.requires_grad:
                    continue
                if inp.node is None:
                    if inp.grad is None:
                        inp.grad = np.zeros(inp.shape)
                    inp.grad += gi
                else:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else prev + gi


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root.node is None:
        raise ValueError("backward: root was not produced by a recorded operation")
    ComputationTape.trace(root).replay()
