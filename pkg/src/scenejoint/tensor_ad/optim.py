"""Trainable parameters, deterministic initialization and the Adam update."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np


class Param:
    """Named trainable array with its gradient buffer and Adam moments."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.array(value)
        self.gradient = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)
        self.step_count = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.gradient[...] = 0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def adam_step(params: Iterable[Param], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update in place; gradients are cleared afterwards."""
    for p in params:
        g = p.gradient
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1 - beta2) * (g * g)
        m_hat = p.adam_m / (1 - beta1**t)
        v_hat = p.adam_v / (1 - beta2**t)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)
        p.zero_grad()


def global_grad_norm(params: Iterable[Param]) -> float:
    total = 0.0
    for p in params:
        total += float(np.sum(p.gradient.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_grad_norm(params: list[Param], max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in params:
            p.gradient *= factor
    return norm
