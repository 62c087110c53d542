"""Marginal and joint displacement metrics, collision detection, and the three world-assembly rules.

All arrays here are plain float64 numpy: ``pred`` is ``[A, K, T, 2]`` over the
scored agents of one scene, ``gt`` is ``[A, T, 2]`` and ``valid`` ``[A, T]``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

METHODS = ("scene_joint", "straight_marginal", "combined_joint")
MAX_ENUMERATION_AGENTS = 6


@dataclass(frozen=True)
class MetricsConfig:
    dist_safe: float = 2.0
    miss_threshold: float = 2.0
    K: int = 6

    def __post_init__(self):
        if not (self.dist_safe > 0 and self.miss_threshold > 0):
            raise ValueError("dist_safe and miss_threshold must be positive")


def _valid_or_all(gt: np.ndarray, valid: np.ndarray | None) -> np.ndarray:
    return np.ones(gt.shape[:2], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)


def endpoint_index(valid: np.ndarray) -> np.ndarray:
    """Last valid future step per agent."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any(axis=1).all():
        raise ValueError("every scored agent needs at least one valid future step")
    t = valid.shape[1]
    return t - 1 - np.argmax(valid[:, ::-1], axis=1)


def displacement_errors(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None):
    """Per agent and mode: mean displacement over valid steps (ADE) and endpoint displacement (FDE)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim != 4 or pred.shape[-1] != 2 or gt.shape != (pred.shape[0], pred.shape[2], 2):
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}")
    valid = _valid_or_all(gt, valid)
    diff = pred - gt[:, None]
    dist = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)
    w = valid[:, None, :].astype(np.float64)
    ade = (dist * w).sum(-1) / w.sum(-1)
    end = endpoint_index(valid)
    fde = dist[np.arange(dist.shape[0]), :, end]
    return ade, fde


class PerAgentMetrics(NamedTuple):
    min_ade: np.ndarray
    min_fde: np.ndarray
    missed: np.ndarray


def per_agent_min_metrics(pred, gt, config: MetricsConfig, valid=None) -> PerAgentMetrics:
    ade, fde = displacement_errors(pred, gt, valid)
    min_fde = fde.min(axis=1)
    return PerAgentMetrics(ade.min(axis=1), min_fde, min_fde > config.miss_threshold)


def _argmin(values: np.ndarray) -> int:
    # np.argmin returns the first minimum, i.e. ties go to the lowest mode
    return int(np.argmin(values))


def avg_min_fde(pred, gt, valid=None) -> tuple[float, int]:
    """Minimum over worlds of the mean endpoint error across agents, and the best world index."""
    _, fde = displacement_errors(pred, gt, valid)
    if fde.shape[0] == 0:
        raise ValueError("no scored agents")
    per_world = fde.mean(axis=0)
    k = _argmin(per_world)
    return float(per_world[k]), k


# ---------------------------------------------------------------------------
# collisions


def first_collision(world: np.ndarray, dist_safe: float) -> tuple[int, int, int] | None:
    """First ``(t, i, j)`` with agents i < j closer than ``dist_safe`` at step t, scanning t, then i, then j."""
    world = np.asarray(world, dtype=np.float64)
    n, timesteps = world.shape[0], world.shape[1]
    rows = world.tolist()
    for t in range(timesteps):
        for i in range(n):
            xi, yi = rows[i][t]
            for j in range(i + 1, n):
                xj, yj = rows[j][t]
                if math.hypot(xi - xj, yi - yj) < dist_safe:
                    return t, i, j
    return None


def detect_collision(world: np.ndarray, config: MetricsConfig | float) -> bool:
    dist_safe = config.dist_safe if isinstance(config, MetricsConfig) else float(config)
    return first_collision(world, dist_safe) is not None


def collision_rate(worlds: Sequence[np.ndarray], config: MetricsConfig) -> float:
    if len(worlds) == 0:
        raise ValueError("collision rate of an empty dataset")
    return sum(detect_collision(w, config) for w in worlds) / len(worlds)


# ---------------------------------------------------------------------------
# world assembly


def assemble_straight_marginal(pred, gt, focal_index: int, valid=None) -> tuple[np.ndarray, int]:
    """All agents' trajectories from the mode closest to the focal agent's endpoint."""
    pred = np.asarray(pred, dtype=np.float64)
    if not 0 <= focal_index < pred.shape[0]:
        raise IndexError(f"focal index {focal_index} outside [0, {pred.shape[0]})")
    _, fde = displacement_errors(pred, gt, valid)
    k = _argmin(fde[focal_index])
    return pred[:, k], k


def assemble_scene_joint(pred, gt, valid=None) -> tuple[np.ndarray, int]:
    _, k = avg_min_fde(pred, gt, valid)
    return np.asarray(pred, dtype=np.float64)[:, k], k


def assemble_combined_joint(pred, gt, valid=None) -> tuple[np.ndarray, np.ndarray]:
    """Composite world: each agent independently takes its lowest-endpoint-error mode."""
    pred = np.asarray(pred, dtype=np.float64)
    _, fde = displacement_errors(pred, gt, valid)
    choice = np.argmin(fde, axis=1)
    return pred[np.arange(pred.shape[0]), choice], choice


class Enumeration(NamedTuple):
    choice: tuple[int, ...]
    mean_fde: float
    evaluated: int


def enumerate_joint_worlds(fde: np.ndarray, max_agents: int = MAX_ENUMERATION_AGENTS) -> Enumeration:
    """Exhaustive search over all K**A mode combinations for the lowest mean endpoint error."""
    fde = np.asarray(fde, dtype=np.float64)
    a, k = fde.shape
    if a > max_agents:
        raise ValueError(f"refusing to enumerate {k}**{a} combinations (limit is {max_agents} agents)")
    best, best_val, count = None, math.inf, 0
    rows = fde.tolist()
    for combo in itertools.product(range(k), repeat=a):
        count += 1
        val = sum(rows[i][c] for i, c in enumerate(combo)) / a
        if val < best_val:
            best, best_val = combo, val
    return Enumeration(best, best_val, count)


# ---------------------------------------------------------------------------
# per-method evaluation


@dataclass(frozen=True)
class EvalInput:
    """One scene's predictions restricted to scored agents; ``focal`` indexes into those agents."""

    scenario_id: str
    pred: np.ndarray
    gt: np.ndarray
    valid: np.ndarray
    focal: int


@dataclass(frozen=True)
class SceneEval:
    scenario_id: str
    method: str
    avg_min_ade: float
    avg_min_fde: float
    avg_mr: float
    collided: bool
    best_world_index: int
    mode_indices: tuple[int, ...] = ()

    def as_dict(self) -> dict:
        d = asdict(self)
        d["mode_indices"] = list(self.mode_indices)
        return d


@dataclass(frozen=True)
class EvalReport:
    method: str
    config: MetricsConfig
    rows: tuple[SceneEval, ...]
    aggregates: dict = field(default_factory=dict)


def select_world(item: EvalInput, method: str) -> tuple[np.ndarray, np.ndarray, int]:
    """Chosen world ``[A, T, 2]``, the mode index per agent, and the reported world index."""
    a = item.pred.shape[0]
    if method == "scene_joint":
        world, k = assemble_scene_joint(item.pred, item.gt, item.valid)
        return world, np.full(a, k), k
    if method == "straight_marginal":
        world, k = assemble_straight_marginal(item.pred, item.gt, item.focal, item.valid)
        return world, np.full(a, k), k
    if method == "combined_joint":
        world, choice = assemble_combined_joint(item.pred, item.gt, item.valid)
        return world, choice, int(choice[item.focal])
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def evaluate_scene(item: EvalInput, method: str, config: MetricsConfig) -> SceneEval:
    if item.pred.shape[0] == 0:
        raise ValueError(f"{item.scenario_id}: no scored agents")
    world, choice, k = select_world(item, method)
    ade, fde = displacement_errors(item.pred, item.gt, item.valid)
    rows = np.arange(ade.shape[0])
    sel_fde = fde[rows, choice]
    return SceneEval(
        scenario_id=item.scenario_id,
        method=method,
        avg_min_ade=float(ade[rows, choice].mean()),
        avg_min_fde=float(sel_fde.mean()),
        avg_mr=float((sel_fde > config.miss_threshold).mean()),
        collided=detect_collision(world, config),
        best_world_index=int(k),
        mode_indices=tuple(int(c) for c in choice),
    )


def evaluate_method(items: Sequence[EvalInput], method: str, config: MetricsConfig) -> EvalReport:
    """Per-scene rows (sorted by scenario id) and dataset means of ADE, FDE, MR and collision rate."""
    if len(items) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    rows = tuple(sorted((evaluate_scene(it, method, config) for it in items), key=lambda r: r.scenario_id))
    n = len(rows)
    aggregates = {
        "avg_min_ade": math.fsum(r.avg_min_ade for r in rows) / n,
        "avg_min_fde": math.fsum(r.avg_min_fde for r in rows) / n,
        "avg_mr": math.fsum(r.avg_mr for r in rows) / n,
        "avg_cr": sum(r.collided for r in rows) / n,
        "num_scenes": n,
    }
    return EvalReport(method, config, rows, aggregates)
