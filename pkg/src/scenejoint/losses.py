"""Winner-takes-all regression losses, mode classification and their weighted total.

Every function accepts one scene (``pred`` ``[A, K, T, 2]``) or a padded batch
(``[B, A, K, T, 2]``); a batch loss is the mean of the per-scene losses.
Within a scene, regression is the smooth-L1 mean over all valid future steps
of the scored agents.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scenejoint.tensor_ad import Tensor, ops

LOSS_MODES = ("scene_wta", "marginal_wta")


@dataclass(frozen=True)
class LossConfig:
    omega: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega must lie in [0, 1], got {self.omega}")


@dataclass(frozen=True, eq=False)
class LossBreakdown:
    """Loss values in float64; ``tensor`` is the differentiable total on the tape."""

    reg: float
    cls: float
    total: float
    winner_index: int | np.ndarray
    tensor: Tensor | None = None


def _batched(pred: Tensor, gt, valid, mask):
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    single = pred.ndim == 4
    if single:
        gt, valid, mask = gt[None], valid[None], mask[None]
    b, a, k, t, _ = (1,) + pred.shape if single else pred.shape
    if gt.shape != (b, a, t, 2) or valid.shape != (b, a, t) or mask.shape != (b, a):
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, valid {valid.shape}, mask {mask.shape}")
    if not mask.any(axis=1).all():
        raise ValueError("no scored agents in scene")
    if not valid[mask].any(axis=-1).all():
        raise ValueError("scored agent with an all-invalid future")
    return single, gt, valid, mask


def _endpoint_errors(pred_value: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """``[B, A, K]`` error at each agent's last valid future step (zero where nothing is valid)."""
    t = valid.shape[-1]
    end = t - 1 - np.argmax(valid[..., ::-1], axis=-1)  # [B, A]
    p = np.take_along_axis(pred_value.astype(np.float64), end[:, :, None, None, None], axis=3)[:, :, :, 0]
    g = np.take_along_axis(gt, end[:, :, None, None], axis=2)[:, :, 0]
    return np.hypot(*(p - g[:, :, None]).transpose(3, 0, 1, 2))


def _weights(valid: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-element weights making the batch smooth-L1 equal the mean of per-scene masked means."""
    m = (valid & mask[:, :, None]).astype(np.float64)
    per_scene = m.sum(axis=(1, 2)) * 2.0
    w = m / per_scene[:, None, None]
    return np.repeat(w[..., None], 2, axis=-1)


def _regress(pred: Tensor, choice: np.ndarray, gt, valid, mask, single: bool) -> Tensor:
    b, a = mask.shape
    t = valid.shape[-1]
    p5 = ops.reshape(pred, (b, a) + pred.shape[-3:]) if single else pred
    idx = np.broadcast_to(choice[:, :, None, None, None], (b, a, 1, t, 2))
    chosen = ops.reshape(ops.take(p5, idx, axis=2), (b, a, t, 2))
    return ops.smooth_l1(chosen, gt, _weights(valid, mask))


def scene_errors(pred_value: np.ndarray, gt, valid, mask) -> np.ndarray:
    """Summed endpoint error over scored agents for every mode: ``[K]`` or ``[B, K]``."""
    single = pred_value.ndim == 4
    p = pred_value[None] if single else pred_value
    g, v, m = (np.asarray(x)[None] if single else np.asarray(x) for x in (gt, valid, mask))
    fde = _endpoint_errors(p, np.asarray(g, dtype=np.float64), np.asarray(v, dtype=bool))
    err = (fde * np.asarray(m, dtype=bool)[:, :, None]).sum(axis=1)
    return err[0] if single else err


def scene_wta_loss(pred: Tensor, gt, valid, mask) -> tuple[Tensor, int | np.ndarray]:
    """Regress only the mode whose summed endpoint error over scored agents is lowest.

    The winner is chosen outside the graph (ties go to the lowest mode), so
    every other mode receives an exactly zero gradient.
    """
    single, gt, valid, mask = _batched(pred, gt, valid, mask)
    err = (_endpoint_errors(pred.value.reshape((len(mask),) + pred.shape[-4:]), gt, valid) * mask[:, :, None]).sum(axis=1)
    winner = np.argmin(err, axis=1)
    choice = np.repeat(winner[:, None], mask.shape[1], axis=1)
    reg = _regress(pred, choice, gt, valid, mask, single)
    return reg, (int(winner[0]) if single else winner)


def marginal_winners(pred_value: np.ndarray, gt, valid) -> np.ndarray:
    single = pred_value.ndim == 4
    p = pred_value[None] if single else pred_value
    g, v = (np.asarray(x)[None] if single else np.asarray(x) for x in (gt, valid))
    w = np.argmin(_endpoint_errors(p, np.asarray(g, dtype=np.float64), np.asarray(v, dtype=bool)), axis=2)
    return w[0] if single else w


def marginal_wta_loss(pred: Tensor, gt, valid, mask) -> tuple[Tensor, np.ndarray]:
    """Each agent regresses its own closest mode; same normalization as the scene loss."""
    single, gt, valid, mask = _batched(pred, gt, valid, mask)
    choice = np.argmin(_endpoint_errors(pred.value.reshape((len(mask),) + pred.shape[-4:]), gt, valid), axis=2)
    reg = _regress(pred, choice, gt, valid, mask, single)
    return reg, (choice[0] if single else choice)


def classification_loss(scene_logits: Tensor, winner_index) -> Tensor:
    """Cross-entropy against the (detached) winning mode."""
    return ops.softmax_cross_entropy(scene_logits, winner_index)


def total_loss(reg: Tensor, cls: Tensor, config: LossConfig = LossConfig(), winner_index=0) -> LossBreakdown:
    w = config.omega
    tensor = ops.add(ops.scale(reg, w), ops.scale(cls, 1.0 - w))
    r, c = float(reg.value), float(cls.value)
    return LossBreakdown(reg=r, cls=c, total=w * r + (1.0 - w) * c, winner_index=winner_index, tensor=tensor)


def compute_loss(pred: Tensor, logits: Tensor, gt, valid, mask, mode: str = "scene_wta", config: LossConfig = LossConfig()) -> LossBreakdown:
    """Regression by ``mode`` plus classification toward the scene-level winner.

    Both modes train the score head on the scene winner, so switching the
    mode changes only the regression term.
    """
    if mode == "scene_wta":
        reg, winner = scene_wta_loss(pred, gt, valid, mask)
    elif mode == "marginal_wta":
        reg, _ = marginal_wta_loss(pred, gt, valid, mask)
        single = pred.ndim == 4
        err = scene_errors(pred.value, gt, valid, mask)
        winner = int(np.argmin(err)) if single else np.argmin(err, axis=1)
    else:
        raise ValueError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
    cls = classification_loss(logits, winner)
    return total_loss(reg, cls, config, winner)
