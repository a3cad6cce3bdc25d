"""A small reverse-mode differentiation tape over numpy arrays.

Usage::

    with GradientTape() as tape:
        p = tape.watch(params)
        loss = ad.sum(ad.tanh(p @ w))
    (grad,) = tape.gradient(loss, [p])

Operations accept :class:`Tensor` or plain arrays. A node is recorded only when
at least one input depends on a watched tensor, so running the same forward
code on plain arrays costs nothing beyond numpy. Composite operations used on
hot paths (softmax, RMS normalization, row L2 normalization, cross entropy)
are single nodes with closed-form backward rules.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DimensionMismatch, IndexOutOfRange, ValidationError, ZeroNorm


class Tensor:
    __slots__ = ("value", "tape", "id")

    def __init__(self, value, tape: "GradientTape | None" = None, node_id: int = -1):
        self.value = value
        self.tape = tape
        self.id = node_id

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        flag = "watched" if self.requires_grad else "const"
        return f"Tensor({flag}, shape={self.value.shape})"


class GradientTape:
    """Records operations on watched tensors; single owner, single use per step."""

    def __init__(self):
        self._nodes: list[tuple[int, tuple, Callable]] = []
        self._next_id = 0

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def watch(self, value) -> Tensor:
        return Tensor(np.array(value, dtype=np.float64), self, self._new_id())

    def _record(self, value, parents: tuple, backward: Callable) -> Tensor:
        out = Tensor(value, self, self._new_id())
        self._nodes.append((out.id, parents, backward))
        return out

    def __len__(self):
        return len(self._nodes)

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``target`` with respect to each of ``sources``.

        Nodes are visited once each, in reverse recording order (a valid
        topological order). Sources the target does not depend on get zeros.
        """
        if not isinstance(target, Tensor) or target.tape is not self:
            return [np.zeros_like(s.value) for s in sources]
        if np.size(target.value) != 1:
            raise ValidationError("gradient target must be a scalar")
        grads: dict[int, np.ndarray] = {target.id: np.ones_like(target.value)}
        for node_id, parents, backward in reversed(self._nodes):
            g = grads.pop(node_id, None)
            if g is None:
                continue
            parent_grads = backward(g)
            for parent, pg in zip(parents, parent_grads):
                if pg is None or not isinstance(parent, Tensor) or parent.tape is not self:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
        out = []
        for s in sources:
            g = grads.get(s.id)
            out.append(np.zeros_like(s.value) if g is None else np.asarray(g, dtype=np.float64))
        return out


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> "GradientTape | None":
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValidationError("tensors from different tapes cannot be combined")
            tape = x.tape
    return tape


def _make(value, parents: tuple, backward: Callable) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(value)
    return tape._record(value, parents, backward)


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _make(
        av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape))
    )


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _make(
        av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape))
    )


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def exp(x) -> Tensor:
    y = np.exp(_val(x))
    return _make(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    xv = _val(x)
    return _make(np.log(xv), (x,), lambda g: (g / xv,))


def tanh(x) -> Tensor:
    y = np.tanh(_val(x))
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


# -- linear algebra and shape -----------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    av, bv = _val(a), _val(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise DimensionMismatch("matmul operands must be at least 2-D")
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionMismatch(f"matmul {av.shape} @ {bv.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _make(av @ bv, (a, b), backward)


def broadcast_to(x, shape) -> Tensor:
    xv = _val(x)
    return _make(np.broadcast_to(xv, shape).copy(), (x,), lambda g: (_unbroadcast(g, xv.shape),))


def transpose(x) -> Tensor:
    return _make(np.swapaxes(_val(x), -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    xv = _val(x)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),)

    return _make(np.sum(xv, axis=axis), (x,), backward)


def mean(x, axis=None) -> Tensor:
    xv = _val(x)
    n = xv.size if axis is None else xv.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def getitem(x, idx) -> Tensor:
    xv = _val(x)

    def backward(g):
        out = np.zeros_like(xv)
        np.add.at(out, idx, g)
        return (out,)

    return _make(xv[idx], (x,), backward)


def take_rows(table, ids) -> Tensor:
    """Gather rows ``table[ids]`` (ids may be any integer array shape)."""
    tv = _val(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise IndexOutOfRange(f"row ids must lie in [0, {tv.shape[0]})")

    def backward(g):
        out = np.zeros_like(tv)
        np.add.at(out, ids, g)
        return (out,)

    return _make(tv[ids], (table,), backward)


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    vals = [_val(x) for x in xs]
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate(vals, axis=axis), tuple(xs), backward)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    vals = [_val(x) for x in xs]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))

    return _make(np.stack(vals, axis=axis), tuple(xs), backward)


# -- fused composites ---------------------------------------------------------


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    xv = _val(x)
    z = np.exp(xv - np.max(xv, axis=-1, keepdims=True))
    y = z / np.sum(z, axis=-1, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=-1, keepdims=True)),))


def rms_norm(x, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps)`` over the last axis, no learned gain."""
    xv = _val(x)
    d = xv.shape[-1]
    r = np.sqrt(np.mean(xv * xv, axis=-1, keepdims=True) + eps)
    y = xv / r

    def backward(g):
        dot = np.sum(g * xv, axis=-1, keepdims=True)
        return (g / r - xv * dot / (d * r**3),)

    return _make(y, (x,), backward)


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Unit-normalize over the last axis."""
    xv = _val(x)
    n = np.linalg.norm(xv, axis=-1, keepdims=True)
    if np.any(n <= eps):
        raise ZeroNorm(f"cannot normalize a vector with norm <= {eps}")
    y = xv / n
    return _make(y, (x,), lambda g: ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / n,))


def cross_entropy(logits, targets, reduction: str = "mean") -> Tensor:
    """Cross entropy of ``logits`` (B x N) against integer ``targets``."""
    xv = _val(logits)
    if xv.ndim != 2:
        raise DimensionMismatch("logits must be 2-D")
    b, n = xv.shape
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (b,):
        raise DimensionMismatch(f"expected {b} targets, got shape {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= n):
        raise IndexOutOfRange(f"targets must lie in [0, {n})")
    m = np.max(xv, axis=1, keepdims=True)
    z = np.exp(xv - m)
    s = np.sum(z, axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    rows = np.arange(b)
    per_row = lse - xv[rows, t]
    if reduction == "mean":
        value, w = np.mean(per_row), 1.0 / b
    elif reduction == "sum":
        value, w = np.sum(per_row), 1.0
    else:
        raise ValidationError(f"unknown reduction {reduction!r}")

    def backward(g):
        p = z / s
        p[rows, t] -= 1.0
        return (p * (g * w),)

    return _make(np.asarray(value), (logits,), backward)
