"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Just enough of an autograd engine for a small transformer: matmul with
broadcasting over leading axes, elementwise arithmetic, layer norm, a
masked softmax, GELU, pairwise channel rotation, row gathering, and
reductions. Arrays are row-major contiguous 32- or 64-bit floats; values
are treated as immutable once created (optimizer updates go through the
trainer's designated update path).

Backward rules receive the upstream gradient as an argument and never
capture their output tensor, so a released graph frees its arrays by
reference counting alone without waiting for the cycle collector.

Forward results are deterministic given identical inputs; gradients are
checked against central finite differences via :func:`grad_check`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DivergenceError, MaskedRowError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A contiguous float array plus an optional backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    # -- construction ------------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Iterable["Tensor"], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        parents = tuple(p for p in parents if p.requires_grad)
        if _grad_enabled and parents:
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- bookkeeping -------------------------------------------------------

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        """Add g into the stored gradient.

        `owned` promises g is freshly allocated for this parent alone (or a
        view of a buffer no other rule will touch again), so the first
        accumulation may alias it instead of copying.
        """
        if self.grad is None:
            if owned and g.dtype == self.data.dtype:
                self.grad = g if g.flags.writeable else np.array(g)
            else:
                # copy: g may be a broadcast view or shared with a sibling rule
                self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from this (scalar) tensor through the graph.

        Interior gradients are released as soon as a node's rule has run;
        only leaves keep their accumulated gradient.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None  # interior node; free eagerly

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gd, sd) in enumerate(zip(g.shape, shape)):
        if sd == 1 and gd != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- arithmetic --------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape), owned=True)

    return Tensor._from_op(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape), owned=True)

    return Tensor._from_op(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a._accumulate(g * c, owned=True)

    return Tensor._from_op(a.data * c, (a,), backward)


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading axes.

    Backward rules: da = g @ b^T, db = a^T @ g (reduced over broadcast axes).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape), owned=True)

    return Tensor._from_op(a.data @ b.data, (a, b), backward)


# -- shape manipulation -------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        a._accumulate(g.reshape(a.shape), owned=True)

    return Tensor._from_op(np.ascontiguousarray(a.data.reshape(shape)), (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(np.ascontiguousarray(g.transpose(inverse)), owned=True)

    return Tensor._from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def take_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis -2: out[..., i, :] = a[..., indices[i], :]."""
    idx = np.asarray(indices, dtype=np.intp)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga.swapaxes(0, -2), idx, g.swapaxes(0, -2))
        a._accumulate(ga, owned=True)

    return Tensor._from_op(np.ascontiguousarray(a.data[..., idx, :]), (a,), backward)


# -- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return Tensor._from_op(np.asarray(a.data.sum(axis=axis)), (a,), backward)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


# -- neural-net primitives -----------------------------------------------------


def masked_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis with disallowed entries fixed at exactly 0.

    `mask` is a boolean array broadcastable to `logits`; True marks an
    admissible entry. Raises MaskedRowError if any row admits nothing.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not m.any(axis=-1).all():
        raise MaskedRowError("softmax row with no admissible entries")
    neg_inf = np.where(m, logits.data, -np.inf)
    neg_inf -= neg_inf.max(axis=-1, keepdims=True)
    probs = np.exp(neg_inf, out=neg_inf)  # exp(-inf) == 0 exactly for disallowed
    probs /= probs.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (probs * g).sum(axis=-1, keepdims=True)
        logits._accumulate(probs * (g - dot), owned=True)

    return Tensor._from_op(probs, (logits,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis, then affine gain/bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def backward(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape), owned=True)
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape), owned=True)
        if x.requires_grad:
            gx = g * gain.data
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            term *= inv_std
            x._accumulate(term, owned=True)

    return Tensor._from_op(xhat * gain.data + bias.data, (x, gain, bias), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def _fast_tanh(u: np.ndarray) -> np.ndarray:
    # tanh(u) = 1 - 2/(exp(2u)+1); numpy's exp has a SIMD loop, tanh does not
    out = np.exp(np.minimum(2.0 * u, 88.0))  # clamp: exp overflow guard, tanh(44)==1
    out += 1.0
    np.divide(2.0, out, out=out)
    return np.subtract(1.0, out, out=out)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    xd = x.data
    t = _fast_tanh(_GELU_C * (xd + 0.044715 * (xd * xd * xd)))

    def backward(g):
        du = _GELU_C * (1.0 + (3 * 0.044715) * (x.data * x.data))
        dt = (1.0 - t * t) * du
        x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x.data * dt), owned=True)

    return Tensor._from_op(0.5 * xd * (1.0 + t), (x,), backward)


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate channel pairs (2k, 2k+1) of the last axis by per-row angles.

    out_even = cos*x_even - sin*x_odd, out_odd = sin*x_even + cos*x_odd.
    `cos`/`sin` broadcast against x[..., ::2]; they carry no gradient.
    The map is orthogonal, so the backward pass is the inverse rotation.
    """
    if x.shape[-1] % 2 != 0:
        raise ShapeError(f"rotate_pairs needs an even last extent, got {x.shape}")
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    data = np.empty_like(x.data)
    data[..., 0::2] = cos * xe - sin * xo
    data[..., 1::2] = sin * xe + cos * xo

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(x.data)
        gx[..., 0::2] = cos * ge + sin * go
        gx[..., 1::2] = -sin * ge + cos * go
        x._accumulate(gx, owned=True)

    return Tensor._from_op(data, (x,), backward)


# -- gradient checking ----------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    probe = Tensor(x.data.astype(np.float64), requires_grad=True)
    y = f(probe)
    if y.size != 1:
        raise ShapeError(f"grad_check target must be scalar, got {y.shape}")
    y.backward()
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    flat = probe.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(Tensor(probe.data)).item()
            flat[i] = orig - step
            lo = f(Tensor(probe.data)).item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * step)
    numeric = numeric.reshape(analytic.shape)

    if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
        raise DivergenceError("non-finite values in gradient check")
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
