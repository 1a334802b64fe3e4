"""A small reverse-mode differentiation engine over numpy arrays.

Every value produced by one of the functions below is a :class:`Tensor` that
remembers its parents and a vector-Jacobian product.  :func:`backward`
walks the recorded graph in reverse topological order and returns gradients
for the named leaves.

The op set is closed: affine maps (``@``, ``+``, ``-``, ``*``, ``/``),
elementwise ``tanh``, ``sigmoid``, ``softplus``, ``relu``, ``exp``, ``log``,
``square``, ``clip``, reductions (``sum``, ``mean``), ``logsumexp``,
pairwise squared distances and row indexing.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np
from scipy.special import expit

from ..errors import ContractError, NumericError

__all__ = [
    "Tensor",
    "leaf",
    "const",
    "backward",
    "tanh",
    "sigmoid",
    "softplus",
    "relu",
    "exp",
    "log",
    "square",
    "clip",
    "tsum",
    "mean",
    "logsumexp",
    "sqdist",
    "log_sum_exp",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "parents", "vjp", "name")
    __array_priority__ = 100

    def __init__(self, data, parents=(), vjp=None, name=None):
        self.data = np.asarray(data)
        self.parents: tuple[Tensor, ...] = parents
        self.vjp: Callable[[np.ndarray], Iterable] | None = vjp
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return Tensor(self.data.T, (self,), lambda g: (g.T,))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __add__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        return Tensor(a + b, (self, other),
                      lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        return Tensor(a - b, (self, other),
                      lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))

    def __rsub__(self, other):
        return _lift(other) - self

    def __neg__(self):
        return Tensor(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        return Tensor(a * b, (self, other),
                      lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        out = a / b
        return Tensor(out, (self, other),
                      lambda g: (_unbroadcast(g / b, a.shape),
                                 _unbroadcast(-g * out / b, b.shape)))

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ContractError("matmul supports 2-D operands only")
        return Tensor(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    def __rmatmul__(self, other):
        return _lift(other) @ self

    def __getitem__(self, key):
        a = self.data

        def vjp(g):
            full = np.zeros_like(a)
            if isinstance(key, slice):
                full[key] = g
            else:
                np.add.at(full, key, g)
            return (full,)

        return Tensor(a[key], (self,), vjp)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def leaf(value, name: str) -> Tensor:
    """A named input whose gradient :func:`backward` reports."""
    return Tensor(value, name=name)


def const(value) -> Tensor:
    return Tensor(value)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return Tensor(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    a = x.data
    out = np.logaddexp(0.0, a)
    return Tensor(out, (x,), lambda g: (g * expit(a),))


def relu(x: Tensor) -> Tensor:
    a = x.data
    return Tensor(np.maximum(a, 0.0), (x,), lambda g: (g * (a > 0),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    a = x.data
    return Tensor(np.log(a), (x,), lambda g: (g / a,))


def square(x: Tensor) -> Tensor:
    a = x.data
    return Tensor(a * a, (x,), lambda g: (2.0 * g * a,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where the clamp is active."""
    a = x.data
    inside = (a >= lo) & (a <= hi)
    return Tensor(np.clip(a, lo, hi), (x,), lambda g: (g * inside,))


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    a = x.data

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(a.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return tsum(x, axis=axis) * (1.0 / n)


def _lse(a: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out


def log_sum_exp(values) -> float:
    """``log(sum(exp(values)))`` without overflow.

    Entries may be ``-inf``; if all of them are, the result is ``-inf``.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ContractError("log_sum_exp of an empty vector")
    return float(_lse(v))


def logsumexp(x: Tensor, axis=None, keepdims=False) -> Tensor:
    a = x.data
    out = _lse(a, axis=axis, keepdims=True)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            w = np.exp(a - out)
        w = np.where(np.isfinite(out), w, 0.0)
        return (g * w,)

    res = out if keepdims else (np.squeeze(out, axis=axis) if axis is not None else out.reshape(()))
    return Tensor(res, (x,), vjp)


def sqdist(a: Tensor, b: Tensor, b_sqnorm: np.ndarray | None = None) -> Tensor:
    """Pairwise squared distances between rows of ``a`` (P x d) and ``b`` (Q x d).

    Uses ``|a|^2 - 2 a.b + |b|^2`` so the whole block is one matrix product.
    ``b_sqnorm`` lets callers reuse cached squared norms of ``b``.
    """
    a, b = _lift(a), _lift(b)
    A, Bm = a.data, b.data
    if A.ndim != 2 or Bm.ndim != 2 or A.shape[1] != Bm.shape[1]:
        raise ContractError(f"sqdist shape mismatch {A.shape} vs {Bm.shape}")
    bn = (Bm * Bm).sum(1) if b_sqnorm is None else b_sqnorm
    d = (A * A).sum(1)[:, None] - 2.0 * (A @ Bm.T) + bn[None, :]
    np.maximum(d, 0.0, out=d)

    def vjp(g):
        ga = 2.0 * (g.sum(1)[:, None] * A - g @ Bm)
        gb = 2.0 * (g.sum(0)[:, None] * Bm - g.T @ A)
        return ga, gb

    return Tensor(d, (a, b), vjp)


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt=None, check_finite: bool = True) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every named leaf it reaches.

    Leaves listed in ``wrt`` (an iterable or a dict of tensors) are always
    reported; those that do not influence ``loss`` get an exact zero array.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if check_finite and not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite", block="loss")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    out: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.name is not None:
            acc = out.get(node.name)
            gg = np.zeros_like(node.data) if g is None else g
            out[node.name] = gg if acc is None else acc + gg
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent.vjp is None and parent.name is None:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    if wrt is not None:
        for t in (wrt.values() if isinstance(wrt, dict) else wrt):
            if t.name is not None and t.name not in out:
                out[t.name] = np.zeros_like(t.data)
    if check_finite:
        for name, g in out.items():
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in block {name!r}", block=name)
    return out
