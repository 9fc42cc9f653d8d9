"""Dense tensors with tape-based reverse-mode differentiation.

Every operation takes and returns :class:`Tensor` objects backed by numpy
arrays. When a :class:`Tape` is active and at least one operand requires a
gradient, the operation appends a node holding its backward closure;
:meth:`Tape.backward` replays those nodes in exact reverse order.

Values are 32-bit by default. :func:`precision` switches the dtype used for
newly created tensors, which is how the finite-difference oracle runs in
64-bit.
"""

from __future__ import annotations

import builtins
import contextlib
import contextvars
import math
import os
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ValidationError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "convitac_active_tape", default=None
)
_DTYPE: contextvars.ContextVar[type] = contextvars.ContextVar(
    "convitac_dtype", default=np.float32
)
DEBUG = os.environ.get("CONVITAC_DEBUG", "") not in ("", "0")

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def default_dtype() -> type:
    return _DTYPE.get()


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Create new tensors with ``dtype`` inside the block."""
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


class Tensor:
    """Row-major array plus an optional gradient buffer.

    ``grad`` stays ``None`` until backward reaches the tensor; use
    :meth:`grad_or_zeros` where an absent gradient should read as zero.
    """

    __slots__ = ("values", "grad", "requires_grad", "name", "_tape")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        self.values = np.array(values, dtype=dtype or default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.values = values
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def grad_or_zeros(self) -> np.ndarray:
        if self.grad is None:
            return np.zeros_like(self.values)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.values)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: float):
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=like.dtype))


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: Tensor, parents: Sequence[Tensor], backward: Backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of executed operations.

    Used as a context manager; operations run inside the ``with`` block are
    recorded. A tape can be replayed once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._token = None
        self.consumed = False

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, out: Tensor, parents: Sequence[Tensor], backward: Backward) -> None:
        self.nodes.append(_Node(out, parents, backward))
        self._produced.add(id(out))
        out._tape = self

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise ContractError("backward already ran on this tape; record a new one")
        if loss.values.size != 1 or loss.ndim > 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g if node.out.grad is None else node.out.grad + g
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in self._produced:
                    prev = pending.get(key)
                    pending[key] = pg if prev is None else prev + pg
                elif parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.dtype)
                else:
                    parent.grad = parent.grad + pg
        self.consumed = True


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor) -> None:
    """Populate gradients of every requires-grad leaf reachable from ``loss``."""
    if loss._tape is None:
        raise ContractError("loss was not recorded on an active tape")
    loss._tape.backward(loss)


def record(values: np.ndarray, parents: Sequence[Tensor], backward_fn: Backward) -> Tensor:
    """Wrap an op result, appending a tape node when gradients are needed.

    ``backward_fn`` maps the output gradient to one gradient (or ``None``)
    per parent. Other modules use this to define fused operations.
    """
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor._wrap(values, requires_grad=needs)
    if DEBUG and not np.isfinite(values).all() and all(
        np.isfinite(p.values).all() for p in parents
    ):
        raise FloatingPointError("non-finite values produced from finite inputs")
    if needs:
        tape._append(out, tuple(parents), backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return record(a.values + b.values, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return record(a.values - b.values, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    return record(av * bv, (a, b),
                  lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.values * c, (a,), lambda g: (g * c,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of x * Phi(x)."""
    v = x.values
    inner = _GELU_C * (v + 0.044715 * (v * v * v))
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def back(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * (v * v))
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return record(out, (x,), back)


# ------------------------------------------------------------------ structure

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes of either operand batch."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(av, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, av.shape),
                None if gb is None else _unbroadcast(gb, bv.shape))

    return record(av @ bv, (a, b), back)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record(x.values.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return record(np.swapaxes(x.values, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return record(x.values.reshape(tuple(shape)), (x,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ValidationError("concat needs at least one part")
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            i != ax and s != r for i, (s, r) in enumerate(zip(p.shape, ref))
        ):
            raise DimensionError(
                f"concat along axis {axis}: shapes {[q.shape for q in parts]} disagree"
            )
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([p.values for p in parts], axis=ax)
    return record(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=ax)))


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    ax = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return record(x.values[index], (x,), back)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    if builtins.sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(x, start, start + s, axis))
        start += s
    return out


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.asarray(x.values.sum(axis=axis)), (x,), back)


def mean_pool(x: Tensor, axis: int = 0) -> Tensor:
    """Arithmetic mean over ``axis`` (the patch/row axis)."""
    n = x.shape[axis]
    if n < 1:
        raise ValidationError("mean_pool over an empty axis")
    shape = x.shape
    return record(x.values.mean(axis=axis), (x,),
                  lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),))


# -------------------------------------------------------------- normalizers

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax; ``-inf`` entries receive exactly zero mass."""
    v = x.values
    m = v.max(axis=axis, keepdims=True)
    e = np.exp(v - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record(y, (x,), back)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply the affine."""
    v = x.values
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    w = None if weight is None else weight.values
    out = xhat if w is None else xhat * w
    if bias is not None:
        out = out + bias.values
    parents = [x] + [t for t in (weight, bias) if t is not None]
    lead = tuple(range(v.ndim - 1))

    def back(g):
        dxhat = g if w is None else g * w
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return grads

    return record(out, parents, back)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    v = x.values
    n = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    n = np.maximum(n, eps)
    y = v / n

    def back(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return record(y, (x,), back)


def logsumexp(v: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    m = v.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.exp(v - m).sum(axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-softmax of ``logits``."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects B x K logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValidationError(f"expected {n} labels, got {labels.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValidationError(f"label out of range [0, {k}): {labels.tolist()}")
    v = logits.values
    lse = logsumexp(v, axis=1, keepdims=True)
    logp = v - lse
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def back(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return record(np.asarray(loss, dtype=v.dtype), (logits,), back)


# ------------------------------------------------------------------ checking

def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-3) -> float:
    """Max relative error between backward gradients and central differences.

    ``f`` is a zero-argument closure over ``inputs`` returning a scalar. Both
    the backward pass and the finite differences run in 64-bit; the inputs'
    original values and gradients are restored afterwards.
    """
    if eps <= 0:
        raise ValidationError("eps must be positive")
    saved = [(t.values, t.grad, t.requires_grad) for t in inputs]
    try:
        for t in inputs:
            t.values = t.values.astype(np.float64)
            t.grad = None
            t.requires_grad = True
        with precision(np.float64):
            with Tape() as tape:
                out = f()
            tape.backward(out)
            analytic = [t.grad_or_zeros().astype(np.float64).ravel() for t in inputs]
            worst = 0.0
            for t, a in zip(inputs, analytic):
                flat = t.values.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = float(f().values)
                    flat[i] = orig - eps
                    fm = float(f().values)
                    flat[i] = orig
                    num = (fp - fm) / (2.0 * eps)
                    err = abs(a[i] - num) / max(abs(a[i]), abs(num), 1e-8)
                    worst = max(worst, err)
    finally:
        for t, (values, grad, req) in zip(inputs, saved):
            t.values, t.grad, t.requires_grad = values, grad, req
    return worst
