"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every op produces a :class:`Tensor` that remembers its parents and a closure
mapping the upstream gradient to per-parent gradients.  Nodes carry a
monotonically increasing creation index, so sorting the reachable subgraph by
that index gives a valid topological order without a global tape object.

Gradients can be taken with respect to any recorded node, not only leaves::

    h = hidden.watch()
    loss = softmax_cross_entropy(h @ w, targets)
    dh = grad_wrt(loss, h)
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from .errors import DataError, DimensionError, GraphError, NumericError

_counter = itertools.count()
_grad_enabled = True

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them (teacher forwards, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")
    __array_priority__ = 100  # keep ndarray + Tensor dispatching to Tensor.__radd__

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._id = next(_counter)
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._id = next(_counter)
        out.op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def watch(self) -> Tensor:
        """Identity node that is always recorded, making this value a
        differentiable point even when nothing upstream requires grad."""
        if not _grad_enabled:
            raise GraphError("cannot watch a tensor while recording is disabled")
        out = Tensor._make(self.data, (self,), lambda g: (g,), "watch")
        # recorded even when self is a constant
        out.requires_grad = True
        out._parents = (self,)
        out._backward = lambda g: (g,)
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        Tape.record(self).backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------------
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

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis: int | None = None) -> Tensor:
        return reduce_sum(self, axis)

    def mean(self, axis: int | None = None) -> Tensor:
        return reduce_mean(self, axis)

    def max(self, axis: int | None = None) -> Tensor:
        return reduce_max(self, axis)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Topologically ordered record of the ops reachable from an output."""

    def __init__(self, output: Tensor, nodes: list[Tensor]):
        self.output = output
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> Tape:
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [output]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._id)
        return cls(output, nodes)

    def __contains__(self, node: Tensor) -> bool:
        return any(n is node for n in self.nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def gradients(self, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Run the backward sweep and return ``{id(node): dL/dnode}``."""
        out = self.output
        if not out.requires_grad:
            raise GraphError("output is not connected to any recorded node")
        if seed is None:
            if out.size != 1:
                raise GraphError(f"gradient seed required for non-scalar output of shape {out.shape}")
            seed = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(seed, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads

    def backward(self) -> None:
        grads = self.gradients()
        for node in self.nodes:
            g = grads.get(id(node))
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g


def grad_wrt(loss: Tensor, node: Tensor) -> Tensor:
    """Gradient of scalar ``loss`` with respect to any recorded ``node``."""
    if loss.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    tape = Tape.record(loss)
    if node not in tape:
        raise GraphError("node is not on the tape of this loss")
    g = tape.gradients().get(id(node))
    if g is None:
        g = np.zeros_like(node.data)
    return Tensor(g)


# -- binary elementwise ------------------------------------------------------

def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("div: division by zero")

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor._make(a.data / b.data, (a, b), backward, "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._make(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., j] + b[j]``: the one row-vector broadcast the models need."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit input {x.shape}")

    def backward(g):
        return g, g.reshape(-1, b.shape[0]).sum(axis=0)

    return Tensor._make(x.data + b.data, (x, b), backward, "add_bias")


# -- unary elementwise -------------------------------------------------------

def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    # np.sign(0) == 0, which is the subgradient we want
    return Tensor._make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return Tensor._make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return Tensor._make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("sqrt needs strictly positive input to stay differentiable")
    y = np.sqrt(x.data)
    return Tensor._make(y, (x,), lambda g: (0.5 * g / y,), "sqrt")


def square(x: Tensor) -> Tensor:
    return Tensor._make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"tanh": tanh, "gelu": gelu, "relu": relu}


# -- shape ops ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return Tensor._make(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {x.shape} -> {tuple(shape)}") from exc
    return Tensor._make(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x: Tensor, key) -> Tensor:
    y = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return Tensor._make(np.array(y, dtype=np.float64), (x,), backward, "getitem")


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` with ids of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"take_rows: ids outside [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return Tensor._make(table.data[ids], (table,), backward, "take_rows")


def causal_mean(x: Tensor, axis: int = 1) -> Tensor:
    """Running mean along ``axis``: position t averages positions 0..t."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"causal_mean: axis {axis} invalid for shape {x.shape}")
    axis = axis % x.ndim
    n = x.shape[axis]
    counts = np.arange(1, n + 1, dtype=np.float64).reshape([n if i == axis else 1 for i in range(x.ndim)])
    y = np.cumsum(x.data, axis=axis) / counts

    def backward(g):
        scaled = g / counts
        rev = np.flip(np.cumsum(np.flip(scaled, axis=axis), axis=axis), axis=axis)
        return (rev,)

    return Tensor._make(y, (x,), backward, "causal_mean")


# -- reductions ----------------------------------------------------------------

def _check_axis(x: Tensor, axis: int | None, op: str) -> int | None:
    if axis is None:
        return None
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"{op}: axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    axis = _check_axis(x, axis, "sum")

    def backward(g):
        if axis is None:
            return (np.full(x.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor._make(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    axis = _check_axis(x, axis, "mean")
    n = x.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is None:
            return (np.full(x.shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), x.shape).copy(),)

    return Tensor._make(np.asarray(x.data.mean(axis=axis)), (x,), backward, "mean")


def reduce_max(x: Tensor, axis: int | None = None) -> Tensor:
    """Max reduction; the gradient goes to the first maximal entry only."""
    axis = _check_axis(x, axis, "max")
    if axis is None:
        flat = int(np.argmax(x.data))

        def backward(g):
            gx = np.zeros(x.size)
            gx[flat] = float(g)
            return (gx.reshape(x.shape),)

        return Tensor._make(np.asarray(x.data.reshape(-1)[flat]), (x,), backward, "max")

    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    y = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return Tensor._make(y, (x,), backward, "max")


# -- softmax family ----------------------------------------------------------

def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = np.exp(z - z.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis."""
    y = _log_softmax_np(x.data)
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return Tensor._make(y, (x,), backward, "log_softmax")


def softmax(x: Tensor) -> Tensor:
    p = softmax_np(x.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._make(p, (x,), backward, "softmax")


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects batch x classes, got {logits.shape}")
    targets = np.asarray(targets)
    n, k = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"targets shape {targets.shape} does not match batch of {n}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise DimensionError("targets must be integer class indices")
    if n and (targets.min() < 0 or targets.max() >= k):
        raise DataError(f"target index outside [0, {k})")
    logp = _log_softmax_np(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (d * (float(g) / n),)

    return Tensor._make(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")
