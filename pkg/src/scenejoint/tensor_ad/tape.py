"""Reverse-mode tape and the tensor handle recorded on it."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from scenejoint.tensor_ad.optim import Param

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A dense array plus its position on a :class:`Tape`.

    Constants carry ``index = None`` and never receive gradients.
    """

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 100

    def __init__(self, value: np.ndarray, tape: "Tape", index: int | None):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def requires_grad(self) -> bool:
        return self.index is not None

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, index={self.index})"

    # operator sugar; each maps onto one recorded primitive
    def __add__(self, other):
        from scenejoint.tensor_ad import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from scenejoint.tensor_ad import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from scenejoint.tensor_ad import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from scenejoint.tensor_ad import ops

        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from scenejoint.tensor_ad import ops

        return ops.matmul(self, other)


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as operations execute, so the list is already in
    topological order and :meth:`backward` walks it in reverse.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._parents: list[tuple[int | None, ...]] = []
        self._backward: list[BackwardFn | None] = []
        self._shapes: list[tuple[int, ...]] = []
        self._watched: dict[int, tuple[Param, Tensor]] = {}
        self._grads: list[np.ndarray | None] | None = None

    def __len__(self) -> int:
        return len(self._parents)

    def constant(self, array) -> Tensor:
        return Tensor(np.asarray(array, dtype=self.dtype), self, None)

    def leaf(self, array) -> Tensor:
        """A differentiable input that is not a :class:`Param`."""
        value = np.array(array, dtype=self.dtype)
        return self.record(value, (), None)

    def watch(self, param: Param) -> Tensor:
        hit = self._watched.get(id(param))
        if hit is not None:
            return hit[1]
        t = self.record(param.value.astype(self.dtype, copy=False), (), None)
        self._watched[id(param)] = (param, t)
        return t

    def record(self, value: np.ndarray, parents: Sequence[Tensor | None], backward: BackwardFn | None) -> Tensor:
        idx = len(self._parents)
        self._parents.append(tuple(None if p is None else p.index for p in parents))
        self._backward.append(backward)
        self._shapes.append(value.shape)
        return Tensor(value, self, idx)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(param) into every watched param's ``gradient``."""
        if loss.tape is not self or loss.index is None:
            raise ValueError("loss is not a differentiable node of this tape")
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._parents)
        grads[loss.index] = np.ones(loss.shape, dtype=loss.value.dtype)
        for idx in range(loss.index, -1, -1):
            g = grads[idx]
            fn = self._backward[idx]
            if g is None or fn is None:
                continue
            parent_grads = fn(g)
            for p, pg in zip(self._parents[idx], parent_grads):
                if p is None or pg is None:
                    continue
                if grads[p] is None:
                    grads[p] = pg
                else:
                    grads[p] = grads[p] + pg
        self._grads = grads
        for param, t in self._watched.values():
            g = grads[t.index]
            if g is not None:
                param.gradient += g.astype(param.gradient.dtype, copy=False)

    def clear(self) -> None:
        """Drop recorded closures and gradients; backward closures reference tensors, so this breaks the cycle early."""
        self._parents.clear()
        self._backward.clear()
        self._shapes.clear()
        self._watched.clear()
        self._grads = None

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last :meth:`backward` loss with respect to ``t`` (zeros if unreached)."""
        if self._grads is None:
            raise RuntimeError("backward has not been run on this tape")
        g = self._grads[t.index] if t.index is not None else None
        return np.zeros(t.shape, dtype=t.value.dtype) if g is None else g
