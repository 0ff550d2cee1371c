"""Reverse-mode automatic differentiation over numpy arrays.

A dynamically recorded tape: every operation on a ``Tensor`` appends a node
holding the parent references and a closure that accumulates gradients into
them. Payloads are float64 numpy arrays (scalars are 0-d arrays), which keeps
the graphs small when model code is written batched.

The same model code runs in two modes: with the tape enabled (training) and
inside ``no_grad()`` (sampling). Both modes execute the identical numpy
arithmetic, so quantities recomputed for importance ratios are bit-equal to
the ones recorded during rollout.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np


class NumericError(RuntimeError):
    """A non-finite value was produced during a differentiated computation."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure numpy arithmetic)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x if x.dtype == np.float64 else x.astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Array node in the computation graph."""

    __slots__ = ("data", "grad", "_parents", "_backward", "_op")

    # Make numpy defer to the reflected operators below instead of trying
    # to coerce Tensors into object arrays.
    __array_ufunc__ = None

    def __init__(self, data, parents: tuple = (), backward: Callable | None = None,
                 op: str = "leaf"):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        if _GRAD_ENABLED:
            self._parents = parents
            self._backward = backward
        else:
            self._parents = ()
            self._backward = None
        self._op = op

    # -- graph bookkeeping ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar output."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data + other.data, (self, other), op="add")
        if _GRAD_ENABLED:
            def back(g, a=self, b=other):
                a._accumulate(_unbroadcast(g, a.data.shape))
                b._accumulate(_unbroadcast(g, b.data.shape))
            out._backward = back
        return out

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data * other.data, (self, other), op="mul")
        if _GRAD_ENABLED:
            def back(g, a=self, b=other):
                a._accumulate(_unbroadcast(g * b.data, a.data.shape))
                b._accumulate(_unbroadcast(g * a.data, b.data.shape))
            out._backward = back
        return out

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data - other.data, (self, other), op="sub")
        if _GRAD_ENABLED:
            def back(g, a=self, b=other):
                a._accumulate(_unbroadcast(g, a.data.shape))
                b._accumulate(_unbroadcast(-g, b.data.shape))
            out._backward = back
        return out

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data / other.data, (self, other), op="div")
        if _GRAD_ENABLED:
            def back(g, a=self, b=other):
                a._accumulate(_unbroadcast(g / b.data, a.data.shape))
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
            out._backward = back
        return out

    def __pow__(self, exponent: float):
        out = Tensor(self.data ** exponent, (self,), op="pow")
        if _GRAD_ENABLED:
            def back(g, a=self, e=exponent):
                a._accumulate(g * e * a.data ** (e - 1))
            out._backward = back
        return out

    def __neg__(self):
        return self * -1.0

    def __radd__(self, other):
        return self + other

    def __rsub__(self, other):
        return Tensor(other) - self

    def __rmul__(self, other):
        return self * other

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __rmatmul__(self, other):
        return Tensor(other) @ self

    def __matmul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        out = Tensor(self.data @ other.data, (self, other), op="matmul")
        if _GRAD_ENABLED:
            def back(g, a=self, b=other):
                ad, bd = a.data, b.data
                if ad.ndim == 1 and bd.ndim == 2:       # (k,) @ (k,n) -> (n,)
                    a._accumulate(g @ bd.T)
                    b._accumulate(np.outer(ad, g))
                elif ad.ndim == 2 and bd.ndim == 1:     # (m,k) @ (k,) -> (m,)
                    a._accumulate(np.outer(g, bd))
                    b._accumulate(ad.T @ g)
                elif ad.ndim == 1 and bd.ndim == 1:     # dot product
                    a._accumulate(g * bd)
                    b._accumulate(g * ad)
                else:                                   # (m,k) @ (k,n)
                    a._accumulate(g @ bd.T)
                    b._accumulate(ad.T @ g)
            out._backward = back
        return out

    # -- elementwise functions ----------------------------------------------

    def tanh(self):
        t = np.tanh(self.data)
        out = Tensor(t, (self,), op="tanh")
        if _GRAD_ENABLED:
            def back(g, a=self, t=t):
                a._accumulate(g * (1.0 - t * t))
            out._backward = back
        return out

    def exp(self):
        e = np.exp(self.data)
        out = Tensor(e, (self,), op="exp")
        if _GRAD_ENABLED:
            def back(g, a=self, e=e):
                a._accumulate(g * e)
            out._backward = back
        return out

    def log(self):
        out = Tensor(np.log(self.data), (self,), op="log")
        if _GRAD_ENABLED:
            def back(g, a=self):
                a._accumulate(g / a.data)
            out._backward = back
        return out

    # -- reductions / shaping ------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,), op="sum")
        if _GRAD_ENABLED:
            def back(g, a=self, axis=axis, keepdims=keepdims):
                if axis is None:
                    a._accumulate(np.broadcast_to(g, a.data.shape).copy())
                else:
                    gg = g if keepdims else np.expand_dims(g, axis)
                    a._accumulate(np.broadcast_to(gg, a.data.shape).copy())
            out._backward = back
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor(self.data.reshape(shape), (self,), op="reshape")
        if _GRAD_ENABLED:
            def back(g, a=self):
                a._accumulate(g.reshape(a.data.shape))
            out._backward = back
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], (self,), op="getitem")
        if _GRAD_ENABLED:
            def back(g, a=self, idx=idx):
                full = np.zeros_like(a.data)
                np.add.at(full, idx, g)
                a._accumulate(full)
            out._backward = back
        return out

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op})"


# -- polymorphic helpers (work on Tensor or ndarray) ---------------------------

ArrayLike = "Tensor | np.ndarray | float"


def data_of(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else _as_array(x)


def tanh(x):
    return x.tanh() if isinstance(x, Tensor) else np.tanh(x)


def exp(x):
    return x.exp() if isinstance(x, Tensor) else np.exp(x)


def log(x):
    return x.log() if isinstance(x, Tensor) else np.log(x)


def tsum(x, axis=None, keepdims=False):
    if isinstance(x, Tensor):
        return x.sum(axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    if isinstance(x, Tensor):
        return x.mean(axis=axis, keepdims=keepdims)
    return np.mean(x, axis=axis, keepdims=keepdims)


def concat(parts: Sequence, axis: int = -1):
    """Concatenate Tensors and/or arrays; returns a Tensor if any part is one."""
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate([_as_array(p) for p in parts], axis=axis)
    tparts = [p if isinstance(p, Tensor) else Tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in tparts], axis=axis),
                 tuple(tparts), op="concat")
    if _GRAD_ENABLED:
        sizes = [p.data.shape[axis] for p in tparts]
        def back(g, tparts=tparts, sizes=sizes, axis=axis):
            start = 0
            for p, s in zip(tparts, sizes):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, start + s)
                p._accumulate(g[tuple(sl)])
                start += s
        out._backward = back
    return out


def stack(parts: Sequence, axis: int = 0):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.stack([_as_array(p) for p in parts], axis=axis)
    tparts = [p if isinstance(p, Tensor) else Tensor(p) for p in parts]
    out = Tensor(np.stack([p.data for p in tparts], axis=axis),
                 tuple(tparts), op="stack")
    if _GRAD_ENABLED:
        def back(g, tparts=tparts, axis=axis):
            for i, p in enumerate(tparts):
                p._accumulate(np.take(g, i, axis=axis))
        out._backward = back
    return out


def minimum(a, b):
    """Elementwise min; at ties the gradient follows the first argument."""
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        return np.minimum(a, b)
    ta = a if isinstance(a, Tensor) else Tensor(a)
    tb = b if isinstance(b, Tensor) else Tensor(b)
    take_a = ta.data <= tb.data
    out = Tensor(np.where(take_a, ta.data, tb.data), (ta, tb), op="min")
    if _GRAD_ENABLED:
        def back(g, ta=ta, tb=tb, take_a=take_a):
            ta._accumulate(_unbroadcast(np.where(take_a, g, 0.0), ta.data.shape))
            tb._accumulate(_unbroadcast(np.where(take_a, 0.0, g), tb.data.shape))
        out._backward = back
    return out


def clip(x, lo: float, hi: float):
    """Clamp to [lo, hi]; gradient is zero outside the interval."""
    if not isinstance(x, Tensor):
        return np.clip(x, lo, hi)
    inside = (x.data >= lo) & (x.data <= hi)
    out = Tensor(np.clip(x.data, lo, hi), (x,), op="clip")
    if _GRAD_ENABLED:
        def back(g, x=x, inside=inside):
            x._accumulate(np.where(inside, g, 0.0))
        out._backward = back
    return out


def logsumexp(x, axis: int = -1, keepdims: bool = False):
    """Numerically stable log-sum-exp; the max shift is treated as constant."""
    shift = np.max(data_of(x), axis=axis, keepdims=True)
    shifted = x - shift
    s = log(tsum(exp(shifted), axis=axis, keepdims=True)) + shift
    if keepdims:
        return s
    shape = list(data_of(s).shape)
    del shape[axis if axis >= 0 else len(shape) + axis]
    return s.reshape(tuple(shape))


def log_softmax(x, axis: int = -1):
    return x - logsumexp(x, axis=axis, keepdims=True)


def softmax(x, axis: int = -1):
    return exp(log_softmax(x, axis=axis))


def _find_nonfinite(root: Tensor) -> str | None:
    """Walk the graph below `root` and name the first op with non-finite data."""
    stack, seen = [root], set()
    bad = None
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if not np.all(np.isfinite(node.data)):
            bad = node._op
        stack.extend(node._parents)
    return bad


def grad(loss_fn: Callable[[Tensor], Tensor], values: np.ndarray) -> np.ndarray:
    """Exact reverse-mode gradient of a scalar loss w.r.t. a flat vector."""
    leaf = Tensor(values)
    out = loss_fn(leaf)
    if not isinstance(out, Tensor):
        raise TypeError("loss_fn must return a Tensor; got a constant")
    if out.data.size != 1:
        raise ValueError("loss_fn must return a scalar")
    if not np.isfinite(out.data):
        raise NumericError(
            f"non-finite loss (first offending node: {_find_nonfinite(out)})")
    out.backward()
    g = leaf.grad if leaf.grad is not None else np.zeros_like(values)
    if not np.all(np.isfinite(g)):
        raise NumericError(
            f"non-finite gradient (first offending node: {_find_nonfinite(out)})")
    return g


def finite_diff_check(loss_fn: Callable, values: np.ndarray,
                      step: float = 1e-5) -> float:
    """Worst relative disagreement between grad() and central differences.

    The denominator is max(|analytic|, |numeric|, 1e-8) per coordinate.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = grad(loss_fn, values)
    numeric = np.zeros_like(values)
    with no_grad():
        for i in range(values.size):
            hi = values.copy()
            lo = values.copy()
            hi[i] += step
            lo[i] -= step
            f_hi = loss_fn(Tensor(hi))
            f_lo = loss_fn(Tensor(lo))
            numeric[i] = (float(data_of(f_hi)) - float(data_of(f_lo))) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
