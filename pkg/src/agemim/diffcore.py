"""Minimal reverse-mode automatic differentiation on numpy arrays.

Graphs are recorded while the forward computation runs: every operation
returns a :class:`Tensor` that remembers its parents and a closure mapping
the upstream gradient to gradients for those parents.  :func:`backward`
walks the recorded graph once in reverse topological order.

Shapes must match exactly for elementwise operations.  The only implicit
broadcast is a 1-D bias added over the rows of a matrix.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "tensor", "constant",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape",
    "relu", "tanh", "exp", "log", "sqrt", "clamp", "sum", "mean",
    "softmax", "log_softmax", "take_along", "take_rows", "concat",
    "l2_normalize", "cosine_similarity", "backward", "grad", "gradcheck",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
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

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar()

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _raise_nonscalar():
    raise ShapeError("item() needs a single-element tensor")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, dtype=dtype)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite output from {op}")
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) and np.ndim(x) == 0


def _unbias(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape(-1, shape[0]).sum(axis=0)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _bias_ok(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = _wrap(a)
        return _node(a.data + b, (a,), lambda g: (g,), "add_scalar")
    if _is_scalar(a):
        return add(b, a)
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape and not _bias_ok(a, b):
        if _bias_ok(b, a):
            return add(b, a)
        _check_same(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (g, _unbias(g, b.shape)), "add")


def neg(a) -> Tensor:
    a = _wrap(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -b)
    if _is_scalar(a):
        return add(neg(b), a)
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a = _wrap(a)
        c = float(b)
        return _node(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    if _is_scalar(a):
        return mul(b, a)
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (g * b.data, g * a.data), "mul")


def div(a, b) -> Tensor:
    if _is_scalar(b):
        return mul(a, 1.0 / float(b))
    if _is_scalar(a):
        b = _wrap(b)
        a = Tensor(np.full(b.shape, a, dtype=b.dtype))
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "div")
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (g / b.data, -g * out / b.data), "div")


def matmul(a, b) -> Tensor:
    """Matrix product; ``a`` may carry leading batch axes.

    ``b`` is either a matrix shared across the batch or has the same batch
    axes as ``a``.
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes {a.shape[:-2]} vs {b.shape[:-2]}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            k, m = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _node(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _wrap(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


# ------------------------------------------------------------ elementwise

def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0).astype(a.dtype), (a,),
                 lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _node(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    a = _wrap(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _node(out, (a,), lambda g: (g * inside,), "clamp")


# -------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    return axis % ndim


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = _wrap(a)
    ax = _norm_axis(axis, a.ndim)
    shape = a.shape

    def bw(g):
        if ax is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _node(np.asarray(a.data.sum(axis=ax)), (a,), bw, "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = _wrap(a)
    n = a.size if axis is None else a.shape[axis]
    ax = _norm_axis(axis, a.ndim)
    shape = a.shape

    def bw(g):
        g = g / n
        if ax is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _node(np.asarray(a.data.mean(axis=ax)), (a,), bw, "mean")


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bw, "log_softmax")


def take_along(a, index) -> Tensor:
    """Pick ``a[i, index[i]]`` from each row of a matrix."""
    a = _wrap(a)
    idx = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"take_along: {a.shape} with index {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError("take_along: index out of range")
    rows = np.arange(a.shape[0])

    def bw(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        out[rows, idx] = g
        return (out,)

    return _node(a.data[rows, idx], (a,), bw, "take_along")


def take_rows(a, index) -> Tensor:
    a = _wrap(a)
    idx = np.asarray(index, dtype=np.int64)

    def bw(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), bw, "take_rows")


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    ax = axis % parts[0].ndim
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or any(
                p.shape[i] != parts[0].shape[i] for i in range(p.ndim) if i != ax):
            raise ShapeError("concat: shapes disagree off the concatenation axis")
    splits = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _node(np.concatenate([p.data for p in parts], axis=ax), parts, bw, "concat")


def l2_normalize(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm < 1e-12):
        raise ValueError("l2_normalize: zero-norm vector")
    out = a.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _node(out, (a,), bw, "l2_normalize")


def cosine_similarity(a, b) -> Tensor:
    """Row-wise cosine between two matrices of equal shape."""
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "cosine_similarity")
    return sum(l2_normalize(a) * l2_normalize(b), axis=-1)


# --------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


def grad(fn: Callable[[Mapping[str, Tensor]], Tensor],
         params: Mapping[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``fn`` on fresh leaves and return (loss, gradients by name)."""
    leaves = {k: Tensor(np.array(v, copy=True), requires_grad=True) for k, v in params.items()}
    loss = fn(leaves)
    backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for k, t in leaves.items()}
    return loss.item(), grads


def gradcheck(fn: Callable[[Mapping[str, Tensor]], Tensor],
              params: Mapping[str, np.ndarray], eps: float = 1e-6,
              wrt: Iterable[str] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error for one parameter is ``max|analytic - numeric|`` divided by the
    larger of the two gradients' max-magnitudes (floored at 1e-12); the
    result is the max over parameters.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    point = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    _, analytic = grad(fn, point)
    names = list(point) if wrt is None else list(wrt)

    def evaluate(p):
        val = fn({k: Tensor(v) for k, v in p.items()}).item()
        if not np.isfinite(val):
            raise NonFiniteError("loss is non-finite at a perturbed point")
        return val

    worst = 0.0
    for name in names:
        base = point[name]
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            bumped = base.copy().reshape(-1)
            bumped[i] += eps
            hi = evaluate({**point, name: bumped.reshape(base.shape)})
            bumped[i] -= 2 * eps
            lo = evaluate({**point, name: bumped.reshape(base.shape)})
            flat[i] = (hi - lo) / (2 * eps)
        a = analytic[name]
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
        worst = max(worst, float(np.abs(a - numeric).max(initial=0.0) / scale))
    return worst
