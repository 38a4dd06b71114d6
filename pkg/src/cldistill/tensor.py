"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable function below records a backward closure on its
output. :func:`backward` walks the recorded graph in reverse topological
order and accumulates gradients into every ``requires_grad`` tensor.

Only the operations needed for multilayer perceptrons and the
distillation losses are provided. Elementwise binary operations require
identical shapes; the single broadcasting case is the bias add inside
:func:`affine`/:func:`add_bias`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeError, UsageError

# ufunc reductions called directly; the ndarray methods add a Python-level
# wrapper that dominates on the small arrays used here
_sum_all = np.add.reduce
_max_all = np.maximum.reduce
_min_all = np.minimum.reduce

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _check_finite(arr: np.ndarray, what: str) -> None:
    # A single sum is NaN/Inf whenever any element is; only then (or on
    # overflow of a large but finite sum) is the elementwise check needed.
    if math.isfinite(_sum_all(arr, axis=None)):
        return
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division by a tensor is not supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str, check: bool = True) -> Tensor:
    if check:
        _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    parents = tuple(parents)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,), "add_const")
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def scale_by(a: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``a`` by the single-element tensor ``s``."""
    if s.size != 1:
        raise ShapeError(f"scale_by needs a single-element scale, got shape {s.shape}")
    sv = s.data.reshape(())
    ad = a.data

    def bw(g):
        return g * sv, np.sum(g * ad).reshape(s.shape)

    return _result(ad * sv, (a, s), bw, "scale_by")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; zero gradient where the floor is active."""
    xd = x.data
    active = xd > floor
    safe = np.where(active, xd, floor)
    with np.errstate(divide="ignore"):
        out = np.log(safe)

    def bw(g):
        return (np.where(active, g / np.where(active, xd, 1.0), 0.0),)

    return _result(out, (x,), bw, "log")


# ---------------------------------------------------------------------------
# reductions and indexing


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result(_sum_all(x.data, axis=None), (x,), lambda g: (np.full(shape, g),), "sum")


def weighted_sum(x: Tensor, weights) -> Tensor:
    """Sum of ``x * weights`` for a constant array of the same shape."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs tensor {x.shape}")
    return _result(_sum_all(x.data * w, axis=None), (x,), lambda g: (g * w,), "weighted_sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return _result(_sum_all(x.data, axis=None) / n, (x,), lambda g: (np.full(shape, g / n),), "mean")


def sum_rows(x: Tensor) -> Tensor:
    """Sum over the last axis of a 2-D tensor, giving shape [rows]."""
    if x.data.ndim != 2:
        raise ShapeError(f"sum_rows needs a 2-D tensor, got shape {x.shape}")
    cols = x.shape[1]
    return _result(
        np.sum(x.data, axis=1),
        (x,),
        lambda g: (np.repeat(g[:, None], cols, axis=1),),
        "sum_rows",
    )


def take_columns(x: Tensor, columns) -> Tensor:
    idx = np.asarray(columns, dtype=np.intp)
    if x.data.ndim != 2:
        raise ShapeError(f"take_columns needs a 2-D tensor, got shape {x.shape}")
    if idx.size and (_min_all(idx) < 0 or _max_all(idx) >= x.shape[1]):
        raise ShapeError(f"column index out of range for shape {x.shape}")
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, (slice(None), idx), g)
        return (full,)

    # a selection of existing values needs no finiteness check of its own
    return _result(x.data[:, idx], (x,), bw, "take_columns", check=False)


def take_rows(x: Tensor, rows) -> Tensor:
    idx = np.asarray(rows, dtype=np.intp)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx], (x,), bw, "take_rows")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors with equal column count along the batch axis."""
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {sorted(cols)}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=0), parts, bw, "concat_rows")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit {x.shape}")
    return _result(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)), "add_bias")


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for x [batch, d_in], weight [d_in, d_out], bias [d_out]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine: input {x.shape} does not fit weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine: bias {bias.shape} does not fit weight {weight.shape}")
    xd, wd = x.data, weight.data

    def bw(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _result(xd @ wd + bias.data, (x, weight, bias), bw, "affine")


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by its Euclidean norm (floored at ``eps``)."""
    xd = x.data
    norms = np.maximum(np.sqrt(np.sum(xd * xd, axis=1, keepdims=True)), eps)
    out = xd / norms
    clipped = np.sqrt(np.sum(xd * xd, axis=1, keepdims=True)) < eps

    def bw(g):
        proj = np.sum(g * out, axis=1, keepdims=True)
        gx = np.where(clipped, g / norms, (g - out * proj) / norms)
        return (gx,)

    return _result(out, (x,), bw, "normalize_rows")


def normalize_cols(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each column by its Euclidean norm (floored at ``eps``)."""
    xd = x.data
    raw = np.sqrt(np.sum(xd * xd, axis=0, keepdims=True))
    norms = np.maximum(raw, eps)
    out = xd / norms
    clipped = raw < eps

    def bw(g):
        proj = np.sum(g * out, axis=0, keepdims=True)
        return (np.where(clipped, g / norms, (g - out * proj) / norms),)

    return _result(out, (x,), bw, "normalize_cols")


# ---------------------------------------------------------------------------
# softmax family


def log_softmax(x: Tensor, scale: float = 1.0) -> Tensor:
    """Row-wise log-softmax of ``scale * x`` for a 2-D tensor, with max subtraction."""
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"log_softmax needs [batch, k>=1], got {x.shape}")
    scale = float(scale)
    xd = x.data if scale == 1.0 else x.data * scale
    shifted = xd - _max_all(xd, axis=1, keepdims=True)
    lse = np.log(_sum_all(np.exp(shifted), axis=1, keepdims=True))
    out = shifted - lse

    def bw(g):
        gx = g - np.exp(out) * g.sum(axis=1, keepdims=True)
        return (gx if scale == 1.0 else gx * scale,)

    return _result(out, (x,), bw, "log_softmax")


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor."""
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"softmax needs [batch, k>=1], got {x.shape}")
    xd = x.data
    e = np.exp(xd - xd.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=1, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# backward pass


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``requires_grad`` tensor."""
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        _check_finite(g, f"backward through {node._op}")
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """Stochastic gradient descent with heavy-ball momentum and L2 weight decay.

    ``v <- momentum * v + grad + weight_decay * param``;
    ``param <- param - lr * v``. Gradients are cleared after each step.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {weight_decay}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise UsageError(f"parameter {i} (shape {p.shape}) has no gradient; call backward first")
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= self.lr * v
        self.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: Sequence[Tensor], optimizer: SGD) -> None:
    if [id(p) for p in params] != [id(p) for p in optimizer.params]:
        raise UsageError("parameter set does not match the optimizer's")
    optimizer.step()
