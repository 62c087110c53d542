"""Layer helpers built from the primitives: MLPs, layer norm, multi-head attention."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from scenejoint.tensor_ad import ops
from scenejoint.tensor_ad.optim import Param, glorot_uniform
from scenejoint.tensor_ad.tape import Tape, Tensor

ACTIVATIONS = ("relu", "none")


class ParamStore:
    """Ordered registry of named parameters with seeded initialization.

    Registration order is the checkpoint order, so models must create
    parameters in a fixed sequence.
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Param] = {}

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Param]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Param(name, np.asarray(value, dtype=self.dtype))
        self._params[name] = p
        return p

    def linear(self, name: str, din: int, dout: int) -> tuple[Param, Param]:
        w = self.add(f"{name}.weight", glorot_uniform(self.rng, din, dout, dtype=self.dtype))
        b = self.add(f"{name}.bias", np.zeros(dout))
        return w, b

    def mlp(self, name: str, sizes: Sequence[int], final_activation: str = "none") -> list["DenseLayer"]:
        layers = []
        for i, (din, dout) in enumerate(zip(sizes[:-1], sizes[1:])):
            w, b = self.linear(f"{name}.{i}", din, dout)
            act = "relu" if i < len(sizes) - 2 else final_activation
            layers.append(DenseLayer(w, b, act))
        return layers

    def layer_norm(self, name: str, dim: int) -> tuple[Param, Param]:
        return self.add(f"{name}.gain", np.ones(dim)), self.add(f"{name}.shift", np.zeros(dim))


@dataclass(frozen=True)
class DenseLayer:
    weight: Param
    bias: Param
    activation: str = "relu"


def dense(tape: Tape, x: Tensor, layer: DenseLayer) -> Tensor:
    w, b = layer.weight, layer.bias
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dense {w.name}: input width {x.shape[-1]} != {w.shape[0]}")
    if layer.activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {layer.activation!r}")
    y = ops.add_bias(ops.matmul(x, tape.watch(w)), tape.watch(b))
    return ops.relu(y) if layer.activation == "relu" else y


def mlp_forward(tape: Tape, x: Tensor, layers: Sequence[DenseLayer]) -> Tensor:
    for layer in layers:
        x = dense(tape, x, layer)
    return x


def layer_norm(tape: Tape, x: Tensor, gain: Param, shift: Param) -> Tensor:
    return ops.layer_norm(x, tape.watch(gain), tape.watch(shift))


@dataclass(frozen=True)
class AttentionParams:
    q: DenseLayer
    k: DenseLayer
    v: DenseLayer
    out: DenseLayer

    @classmethod
    def create(cls, store: ParamStore, name: str, dim: int) -> "AttentionParams":
        return cls(*(DenseLayer(*store.linear(f"{name}.{p}", dim, dim), "none") for p in ("q", "k", "v", "out")))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = ops.reshape(x, (*lead, n, heads, d // heads))
    nd = len(lead)
    return ops.transpose(x, (*range(nd), nd + 1, nd, nd + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    nd = len(lead)
    x = ops.transpose(x, (*range(nd), nd + 1, nd, nd + 2))
    return ops.reshape(x, (*lead, n, h * dh))


def multihead_attention(
    tape: Tape,
    query: Tensor,
    key: Tensor,
    value: Tensor,
    heads: int,
    params: AttentionParams,
    key_mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention with learned projections.

    Inputs are ``[..., Nq, D]`` / ``[..., Nk, D]`` with matching leading batch
    dims. ``key_mask`` (``[..., Nk]`` booleans) hides padded keys; every query
    must see at least one key.
    """
    d = query.shape[-1]
    if d % heads:
        raise ValueError(f"model width {d} is not divisible by {heads} heads")
    if key.shape != value.shape or key.shape[:-2] != query.shape[:-2] or key.shape[-1] != d:
        raise ValueError(f"attention shapes query={query.shape} key={key.shape} value={value.shape}")
    q = _split_heads(dense(tape, query, params.q), heads)
    k = _split_heads(dense(tape, key, params.k), heads)
    v = _split_heads(dense(tape, value, params.v), heads)
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))), 1.0 / math.sqrt(d // heads))
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        if not km.any(axis=-1).all():
            raise ValueError("every query needs at least one unmasked key")
        bias = np.where(km, 0.0, -1e9)[..., None, None, :]
        scores = ops.add(scores, np.broadcast_to(bias, scores.shape))
    weights = ops.softmax(scores)
    out = dense(tape, _merge_heads(ops.matmul(weights, v)), params.out)
    return (out, weights) if return_weights else out
