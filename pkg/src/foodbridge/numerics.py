"""Dense tensors with a reverse-mode tape, plus the Adam update.

Arrays are plain numpy; :class:`Tensor` wraps one array and remembers how it
was produced so :func:`backward` can walk the graph in reverse topological
order. Only the primitives the models need are implemented.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class MissingGradientError(KeyError):
    pass


_FLOATS = (np.float32, np.float64)
_sum_all = np.add.reduce  # the ufunc directly; ndarray.sum adds a Python wrapper per call


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a sum is NaN/Inf whenever any entry is; confirm elementwise before raising
    if not np.isfinite(_sum_all(arr, axis=None)) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


class Tensor:
    """An immutable array node on the autodiff tape."""

    __slots__ = ("data", "requires_grad", "parents", "grad_fn", "op")

    def __init__(self, data, requires_grad: bool = False, *, parents=(), grad_fn=None, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype.type not in _FLOATS:
            arr = arr.astype(np.float32)
        _check_finite(arr, op)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = parents
        self.grad_fn: Callable | None = grad_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.grad_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float32)
    return Tensor(arr)


def _node(data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    for p in parents:
        if p.requires_grad:
            return Tensor(data, True, parents=tuple(parents), grad_fn=grad_fn, op=op)
    return Tensor(data, False, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def grad_fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _node(out, (a, b), grad_fn, "add")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _node(out, (a, b), grad_fn, "mul")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    # activations [..., K] times a weight [K, N] run as one 2-D product
    flat = b.data.ndim == 2 and a.data.ndim > 2
    if flat:
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(*a.shape[:-1], b.shape[-1])
    else:
        out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if flat:
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(out, (a, b), grad_fn, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = tuple(sorted(range(len(axes)), key=axes.__getitem__))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def _is_basic_index(key) -> bool:
    if not isinstance(key, tuple):
        key = (key,)
    return all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in key)


def getitem(a: Tensor, key) -> Tensor:
    """Indexing / gathering. Repeated indices accumulate in the backward pass."""
    out = a.data[key]
    basic = _is_basic_index(key)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _node(np.array(out, copy=True), (a,), grad_fn, "gather")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise DimensionError(f"embedding ids out of range [0, {n})")
    out = table.data[ids]

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _node(out, (table,), grad_fn, "embedding")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, ts, grad_fn, "concat")


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)
    shape = a.shape

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(out), (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis), np.asarray(1.0 / count, dtype=a.dtype))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth, so finite differences behave)."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    y = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        # 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 a x^2), built with few temporaries
        d = x2 * (3 * 0.044715 * _GELU_C)
        d += _GELU_C
        d *= x
        s = t * t
        np.subtract(1.0, s, out=s)
        d *= s
        d += t
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return _node(y, (a,), grad_fn, "gelu")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), grad_fn, "softmax")


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    scale = 1.0 / xd.shape[-1]
    xc = xd - _sum_all(xd, axis=-1, keepdims=True) * scale
    var = _sum_all(xc * xc, axis=-1, keepdims=True) * scale
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def grad_fn(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = _unbroadcast(g * xhat, gamma.shape)
        if beta.requires_grad:
            gb = _unbroadcast(g, beta.shape)
        if x.requires_grad:
            gh = g * gamma.data
            gx = (inv / n) * (n * gh - gh.sum(axis=-1, keepdims=True)
                              - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return _node(out, (x, gamma, beta), grad_fn, "layer_norm")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Summed token NLL per leading row: logits [B,T,n], targets [B,T] -> [B]."""
    tg = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != tg.shape:
        raise DimensionError(f"logits {logits.shape} do not match targets {tg.shape}")
    n = logits.shape[-1]
    if tg.size and (tg.min() < 0 or tg.max() >= n):
        raise DimensionError(f"target id out of range [0, {n})")
    w = np.ones(tg.shape, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    logp = log_softmax(logits.data)
    picked = np.take_along_axis(logp, tg[..., None], axis=-1)[..., 0]
    out = -(picked * w).sum(axis=tuple(range(1, tg.ndim)))

    def grad_fn(g):
        p = np.exp(logp)
        np.put_along_axis(p, tg[..., None], np.take_along_axis(p, tg[..., None], axis=-1) - 1.0, axis=-1)
        scale = (w * g.reshape(g.shape + (1,) * (tg.ndim - 1)))[..., None]
        return (p * scale,)

    return _node(out, (logits,), grad_fn, "cross_entropy")


def mse(pred: Tensor, target, axes=(-2, -1)) -> Tensor:
    """Mean squared error over ``axes``; ``target`` is a constant."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != t.shape:
        raise DimensionError(f"mse shape mismatch: {pred.shape} vs {t.shape}")
    diff = pred.data - t
    count = int(np.prod([pred.shape[a] for a in axes]))
    out = (diff * diff).sum(axis=axes) / count

    def grad_fn(g):
        return (np.expand_dims(g, axes) * (2.0 / count) * diff,)

    return _node(np.asarray(out, dtype=pred.dtype), (pred,), grad_fn, "mse")


# ---------------------------------------------------------------- backward

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each leaf in ``params``.

    Parameters the loss does not reach get an exactly-zero gradient. Anything
    that is not a trainable leaf raises :class:`MissingGradientError`.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    for name, p in params.items():
        if not (isinstance(p, Tensor) and p.requires_grad and p.is_leaf):
            raise MissingGradientError(f"{name} is not a trainable leaf on the tape")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topological(loss)):
            if node.grad_fn is None:
                continue
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    out = {}
    for name, p in params.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
    return out


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise DimensionError(f"adam shapes differ: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    dt = param.dtype
    g = grad.astype(dt, copy=False)
    t = state.t + 1
    m = dt.type(state.beta1) * state.m + dt.type(1.0 - state.beta1) * g
    v = dt.type(state.beta2) * state.v + dt.type(1.0 - state.beta2) * (g * g)
    m_hat = m / dt.type(1.0 - state.beta1 ** t)
    v_hat = v / dt.type(1.0 - state.beta2 ** t)
    new = param - dt.type(state.lr) * m_hat / (np.sqrt(v_hat) + dt.type(state.eps))
    _check_finite(new, "adam_step")
    return new, replace(state, m=m, v=v, t=t)


def finite_difference(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``arr`` (mutated in place, then restored)."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad
