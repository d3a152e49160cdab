"""Reverse-mode autodiff over numpy arrays.

Every op builds a node holding its parents and a closure that maps the
incoming output gradient to per-parent gradients.  backward() walks the
graph once in reverse topological order, so shared subexpressions are
visited exactly once per call, and gradients from repeated backward()
calls accumulate into leaf ``.grad`` until an explicit zero.

Only float32 and float64 are supported.  float32 is the training dtype;
float64 exists so finite-difference checks are not drowned in rounding
noise.  Mixed-dtype expressions are rejected rather than silently
promoted.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

_ALLOWED_DTYPES = (np.float32, np.float64)

# multiply-add counters keyed by tag; "all" counts every matmul
_mac_counts: dict[str, int] = {}


def reset_macs() -> None:
    _mac_counts.clear()


def mac_count(tag: str = "all") -> int:
    return _mac_counts.get(tag, 0)


def _record_macs(n: int, tag: str | None) -> None:
    _mac_counts["all"] = _mac_counts.get("all", 0) + n
    if tag is not None:
        _mac_counts[tag] = _mac_counts.get(tag, 0) + n


class Tensor:
    """A numpy array plus the graph edges needed for reverse mode.

    ``requires_grad`` marks leaves that should receive gradients; interior
    nodes always propagate.  ``grad`` is only ever populated on leaves.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            if np.issubdtype(arr.dtype, np.floating) or np.issubdtype(arr.dtype, np.integer):
                arr = arr.astype(np.float32)
            else:
                raise TypeError(f"tensor dtype must be float32 or float64, got {arr.dtype}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # convenience operators used throughout the model code
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _make_node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    if any(p.requires_grad or p._vjp is not None for p in parents):
        out._parents = parents
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


def _check_dtype(op: str, *tensors: Tensor) -> None:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise TypeError(f"{op}: mixed dtypes {dt} and {t.data.dtype}")


def _suffix_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    """Allow broadcasting only over missing leading axes.

    The shorter shape must equal the trailing part of the longer one; no
    size-1 stretching inside a shape.  Keeps elementwise grads a plain sum
    over the leading axes.
    """
    sa, sb = a.data.shape, b.data.shape
    small = sa if len(sa) <= len(sb) else sb
    large = sb if len(sa) <= len(sb) else sa
    if len(small) > 0 and large[len(large) - len(small):] != small:
        raise ValueError(f"{op}: shapes {sa} and {sb} are not batch-compatible")
    if len(small) == 0 and small != large:
        # scalar tensor against anything is fine
        pass


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over the leading axes so it matches a suffix-broadcast input."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtype("add", a, b)
    _suffix_broadcast("add", a, b)
    data = a.data + b.data

    def vjp(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return _make_node(data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtype("sub", a, b)
    _suffix_broadcast("sub", a, b)
    data = a.data - b.data

    def vjp(g):
        return _reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)

    return _make_node(data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtype("mul", a, b)
    _suffix_broadcast("mul", a, b)
    data = a.data * b.data

    def vjp(g):
        return _reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)

    return _make_node(data, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)
    data = a.data * s

    def vjp(g):
        return (g * s,)

    return _make_node(data, (a,), vjp)


# ---------------------------------------------------------------------------
# matmul and fused network kernels


def matmul(a: Tensor, b: Tensor, tag: str | None = None) -> Tensor:
    """Batched matrix product; batch axes follow the suffix rule.

    Counts one multiply-add per scalar product term into the MAC ledger
    (optionally under ``tag``) so attention cost claims can be asserted.
    """
    _check_dtype("matmul", a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul: operands must have rank >= 2, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ for {a.data.shape} and {b.data.shape}")
    ba, bb = a.data.shape[:-2], b.data.shape[:-2]
    if ba != bb and ba[len(ba) - len(bb):] != bb and bb[len(bb) - len(ba):] != ba:
        raise ValueError(f"matmul: batch axes of {a.data.shape} and {b.data.shape} are not compatible")
    data = np.matmul(a.data, b.data)
    _record_macs(data.size * a.data.shape[-1], tag)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _reduce_to(ga, a.data.shape), _reduce_to(gb, b.data.shape)

    return _make_node(data, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with w:[d_in, d_out], b:[d_out]; x may carry leading axes."""
    _check_dtype("linear", x, w, b)
    if w.data.ndim != 2 or b.data.ndim != 1 or b.data.shape[0] != w.data.shape[1]:
        raise ValueError(f"linear: weight {w.data.shape} and bias {b.data.shape} are inconsistent")
    if x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"linear: input {x.data.shape} does not match weight {w.data.shape}")
    data = np.matmul(x.data, w.data) + b.data
    _record_macs(data.size * w.data.shape[0], None)

    def vjp(g):
        gx = np.matmul(g, w.data.T)
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.data.shape[-1])
        gw = x2.T @ g2
        gb = g2.sum(axis=0)
        return gx, gw, gb

    return _make_node(data, (x, w, b), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along one axis (max subtraction)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _make_node(y, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    _check_dtype("layer_norm", x, gamma, beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ValueError(f"layer_norm: gain/bias must have shape ({d},)")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (x.data - mean) * inv
    data = xhat * gamma.data + beta.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead)
        ggamma = (g * xhat).sum(axis=lead)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        gx = (dxhat - m1 - xhat * m2) * inv
        return gx, ggamma, gbeta

    return _make_node(data, (x, gamma, beta), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    c = x.data.dtype.type(_GELU_C)
    k = x.data.dtype.type(0.044715)
    u = c * (x.data + k * x.data ** 3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def vjp(g):
        du = c * (1.0 + 3.0 * k * x.data ** 2)
        dx = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        return (g * dx.astype(x.data.dtype),)

    return _make_node(data.astype(x.data.dtype), (x,), vjp)


# ---------------------------------------------------------------------------
# structural ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _make_node(data, (x,), vjp)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return _make_node(data, (x,), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat: empty input list")
    _check_dtype("concat", *tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make_node(data, tuple(tensors), vjp)


def slice_along(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis."""
    n = x.data.shape[axis]
    if not (0 <= start < stop <= n):
        raise ValueError(f"slice_along: range [{start}, {stop}) invalid for extent {n}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    data = x.data[idx]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _make_node(data, (x,), vjp)


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather rows along an axis; backward scatter-adds, so repeated
    indices accumulate."""
    idx = np.asarray(indices)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("take: indices must be a 1-D integer array")
    n = x.data.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take: index out of range for extent {n}")
    data = np.take(x.data, idx, axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gm = np.moveaxis(gx, axis, 0)
        np.add.at(gm, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _make_node(data, (x,), vjp)


def repeat(x: Tensor, n: int, axis: int) -> Tensor:
    """Tile a size-1 axis n times; backward sums back over it."""
    if x.data.shape[axis] != 1:
        raise ValueError(f"repeat: axis {axis} of {x.data.shape} must have extent 1")
    data = np.repeat(x.data, n, axis=axis)

    def vjp(g):
        return (g.sum(axis=axis, keepdims=True),)

    return _make_node(data, (x,), vjp)


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.data.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _make_node(data, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.data.ndim)
    count = 1
    for a in axes:
        count *= x.data.shape[a]
    data = x.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / x.data.dtype.type(count), x.data.shape).copy(),)

    return _make_node(data, (x,), vjp)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative DFS; recursion would overflow on deep unrolled graphs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into each requires_grad leaf's ``.grad``.

    Uses a per-call gradient map, so calling backward on two different
    losses (or twice on one) sums contributions; nothing is cleared here.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.data.shape}")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    nodes = {id(loss): loss}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    nodes[key] = parent
        elif node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between backward() and central differences.

    Relative error per coordinate is |a - n| / max(1, |a|, |n|).  Requires
    float64 input; at float32 the difference quotient itself is too noisy
    to certify anything.
    """
    if x.data.dtype != np.float64:
        raise TypeError("grad_check: input must be float64")
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ValueError("grad_check: f must return a scalar")
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(x).data)
        flat[i] = orig - step
        lo = float(f(x).data)
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * step)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
