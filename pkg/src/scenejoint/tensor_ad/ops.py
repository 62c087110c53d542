"""Differentiable primitives.

Every function takes :class:`Tensor` inputs (plain arrays are accepted as
constants on the argument's tape) and records exactly one node. There is no
implicit broadcasting except :func:`add_bias`; use :func:`repeat` to tile.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from scenejoint.tensor_ad.tape import Tape, Tensor


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one argument must be a Tensor")


def _lift(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("tensors belong to different tapes")
        return x
    return tape.constant(x)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _sum64(x: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    return np.sum(x, axis=axis, dtype=np.float64, keepdims=keepdims).astype(x.dtype)


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _same_shape(a, b, "add")
    return tape.record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _same_shape(a, b, "sub")
    return tape.record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.tape.dtype.type(c)
    return x.tape.record(x.value * c, (x,), lambda g: (g * c,))


def add_bias(x: Tensor, bias) -> Tensor:
    """``x[..., d] + bias[d]``: the only broadcasting primitive."""
    tape = _tape_of(x, bias)
    x, bias = _lift(tape, x), _lift(tape, bias)
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ValueError(f"add_bias: bias {bias.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return tape.record(x.value + bias.value, (x, bias), lambda g: (g, _sum64(g, axis=lead)))


def matmul(a, b) -> Tensor:
    """``a[..., n, k] @ b[..., k, m]`` with equal batch dims, or ``b`` a plain ``[k, m]`` matrix."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    shared = bv.ndim == 2
    if not shared and av.shape[:-2] != bv.shape[:-2]:
        raise ValueError(f"matmul: batch dims differ {a.shape} @ {b.shape}")
    out = av @ bv

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return tape.record(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return x.tape.record(np.where(mask, x.value, 0).astype(x.value.dtype), (x,), lambda g: (g * mask,))


def softmax(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / _sum64(e, axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - _sum64(g * y, axis=-1, keepdims=True)),)

    return x.tape.record(y, (x,), backward)


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    out = _sum64(x.value, axis=axis)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, g, dtype=x.value.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return x.tape.record(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    if axis is None:
        count = x.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis), 1.0 / count)


def max(x: Tensor, axis: int) -> Tensor:  # noqa: A001
    """Max over one axis; the gradient goes to the first maximal entry only."""
    arg = np.expand_dims(np.argmax(x.value, axis=axis), axis)
    out = np.take_along_axis(x.value, arg, axis=axis).squeeze(axis)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return x.tape.record(out, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return x.tape.record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return x.tape.record(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    tape = _tape_of(*xs)
    xs = [_lift(tape, x) for x in xs]
    out = np.concatenate([x.value for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape.record(out, xs, backward)


def stack(xs: Sequence[Tensor], axis: int) -> Tensor:
    """Join equally shaped tensors along a new non-negative ``axis``."""
    if axis < 0:
        raise ValueError("stack needs a non-negative axis")
    return concat([reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs], axis=axis)


def repeat(x: Tensor, n: int, axis: int) -> Tensor:
    """Tile a length-1 axis ``n`` times."""
    if x.shape[axis] != 1:
        raise ValueError(f"repeat: axis {axis} of {x.shape} must have extent 1")
    out = np.repeat(x.value, n, axis=axis)
    return x.tape.record(out, (x,), lambda g: (_sum64(g, axis=axis, keepdims=True),))


def pad(x: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad one axis."""
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    out = np.pad(x.value, widths)
    n = x.shape[axis]

    def backward(g):
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(before, before + n)
        return (g[tuple(idx)],)

    return x.tape.record(out, (x,), backward)


def index(x: Tensor, idx) -> Tensor:
    """``x[idx]`` for any numpy index; repeated entries accumulate gradient."""
    out = x.value[idx]
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return x.tape.record(np.array(out), (x,), backward)


def take(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis`` with a constant integer array broadcastable like ``np.take_along_axis``."""
    out = np.take_along_axis(x.value, indices, axis=axis)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        full = np.broadcast_to(indices, g.shape)
        # scatter-add: indices may repeat along the gather axis
        grid = list(np.indices(g.shape, sparse=True))
        grid[axis] = full
        np.add.at(gx, tuple(grid), g)
        return (gx,)

    return x.tape.record(out, (x,), backward)


def smooth_l1(pred: Tensor, target, weight) -> Tensor:
    """Huber loss (threshold 1) averaged with per-element weights: ``sum(w * h) / sum(w)``.

    A 0/1 ``weight`` gives the masked mean over valid elements.
    """
    tape = pred.tape
    target = np.asarray(target.value if isinstance(target, Tensor) else target, dtype=tape.dtype)
    w = np.asarray(weight, dtype=np.float64)
    if target.shape != pred.shape or w.shape != pred.shape:
        raise ValueError(f"smooth_l1: shapes {pred.shape}, {target.shape}, {w.shape} differ")
    total = w.sum()
    if not total > 0:
        raise ValueError("smooth_l1: mask selects no elements")
    e = pred.value.astype(np.float64) - target
    ae = np.abs(e)
    h = np.where(ae < 1.0, 0.5 * e * e, ae - 0.5)
    out = np.asarray(np.sum(w * h) / total, dtype=tape.dtype)

    def backward(g):
        d = np.where(ae < 1.0, e, np.sign(e)) * w / total
        return ((float(g) * d).astype(pred.value.dtype),)

    return tape.record(out, (pred,), backward)


def softmax_cross_entropy(logits: Tensor, target_index) -> Tensor:
    """``-log softmax(logits)[target]``; a ``[B, K]`` input averages over rows."""
    tape = logits.tape
    z = logits.value.astype(np.float64)
    single = z.ndim == 1
    if single:
        z = z[None]
    targets = np.atleast_1d(np.asarray(target_index, dtype=np.int64))
    k = z.shape[-1]
    if targets.shape != (z.shape[0],):
        raise ValueError(f"softmax_cross_entropy: {targets.shape[0]} targets for {z.shape[0]} rows")
    if np.any(targets < 0) or np.any(targets >= k):
        raise IndexError(f"softmax_cross_entropy: target index out of range [0, {k})")
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True)) + zmax
    logp = z - lse
    rows = np.arange(z.shape[0])
    out = np.asarray(-logp[rows, targets].mean(), dtype=tape.dtype)

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        d = float(g) * p / z.shape[0]
        return ((d[0] if single else d).astype(logits.value.dtype),)

    return tape.record(out, (logits,), backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of the last axis to mean 0 / variance 1, then apply ``gain`` and ``shift``."""
    xv = x.value
    d = xv.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ValueError(f"layer_norm: gain/shift must have shape ({d},)")
    x64 = xv.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gv = gain.value.astype(np.float64)
    out = (xhat * gv + shift.value).astype(xv.dtype)
    lead = tuple(range(xv.ndim - 1))

    def backward(g):
        g64 = g.astype(np.float64)
        gxhat = g64 * gv
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g64 * xhat).sum(axis=lead)
        gshift = g64.sum(axis=lead)
        dt = xv.dtype
        return gx.astype(dt), ggain.astype(gain.value.dtype), gshift.astype(shift.value.dtype)

    return x.tape.record(out, (x, gain, shift), backward)
