"""Planar rigid poses and the pairwise relative pose embedding between instances."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

_EPS = 1e-9


def cross2(a, b) -> float:
    """Scalar 2D cross product ``a.x * b.y - a.y * b.x``."""
    return a[0] * b[1] - a[1] * b[0]


@dataclass(frozen=True)
class Pose2:
    """A planar frame: origin position plus a unit heading vector."""

    position: tuple[float, float]
    heading_vector: tuple[float, float]

    def __init__(self, position, heading_vector):
        hx, hy = float(heading_vector[0]), float(heading_vector[1])
        norm = math.hypot(hx, hy)
        if not norm >= _EPS:
            raise ValueError(f"heading vector {heading_vector!r} has near-zero norm")
        object.__setattr__(self, "position", (float(position[0]), float(position[1])))
        object.__setattr__(self, "heading_vector", (hx / norm, hy / norm))

    @classmethod
    def from_angle(cls, x: float, y: float, theta: float) -> "Pose2":
        return cls((x, y), (math.cos(theta), math.sin(theta)))

    @property
    def rotation(self) -> np.ndarray:
        """Local-to-global rotation matrix; columns are the frame axes."""
        c, s = self.heading_vector
        return np.array([[c, -s], [s, c]])

    def to_global(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return pts @ self.rotation.T + np.asarray(self.position)


def transform_to_frame(points, frame: Pose2) -> np.ndarray:
    """Express global points in ``frame``: the origin maps to (0, 0), the heading to +x."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return (pts - np.asarray(frame.position)) @ frame.rotation


class RelativePoseEmbedding(NamedTuple):
    sin_alpha: float
    cos_alpha: float
    sin_beta: float
    cos_beta: float
    distance: float


def relative_pose_embedding(frame_i: Pose2, frame_j: Pose2) -> RelativePoseEmbedding:
    """Heading difference, relative azimuth and distance from frame i to frame j.

    ``d`` points from i to j. The azimuth is measured against the heading of
    ``frame_j``; when the frames coincide it falls back to (sin, cos) = (0, 1).
    """
    vi, vj = frame_i.heading_vector, frame_j.heading_vector
    # headings are unit-norm by construction, so the denominators are 1
    sin_a = cross2(vi, vj)
    cos_a = vi[0] * vj[0] + vi[1] * vj[1]
    d = (frame_j.position[0] - frame_i.position[0], frame_j.position[1] - frame_i.position[1])
    dist = math.hypot(*d)
    if dist < _EPS:
        sin_b, cos_b = 0.0, 1.0
    else:
        sin_b = cross2(d, vj) / dist
        cos_b = (d[0] * vj[0] + d[1] * vj[1]) / dist
    return RelativePoseEmbedding(sin_a, cos_a, sin_b, cos_b, dist)


def rpe_matrix(poses: Sequence[Pose2]) -> np.ndarray:
    """Vectorized ``[N, N, 5]`` table of :func:`relative_pose_embedding` for all ordered pairs."""
    if len(poses) == 0:
        raise ValueError("rpe_matrix needs at least one pose")
    pos = np.array([p.position for p in poses], dtype=np.float64)
    head = np.array([p.heading_vector for p in poses], dtype=np.float64)
    return rpe_from_arrays(pos, head)


def rpe_from_arrays(pos: np.ndarray, head: np.ndarray) -> np.ndarray:
    """Same as :func:`rpe_matrix` on raw ``[N, 2]`` position and unit-heading arrays."""
    vi = head[:, None, :]
    vj = head[None, :, :]
    sin_a = vi[..., 0] * vj[..., 1] - vi[..., 1] * vj[..., 0]
    cos_a = (vi * vj).sum(-1)
    d = pos[None, :, :] - pos[:, None, :]
    dist = np.hypot(d[..., 0], d[..., 1])
    degenerate = dist < _EPS
    safe = np.where(degenerate, 1.0, dist)
    sin_b = (d[..., 0] * vj[..., 1] - d[..., 1] * vj[..., 0]) / safe
    cos_b = (d * vj).sum(-1) / safe
    sin_b = np.where(degenerate, 0.0, sin_b)
    cos_b = np.where(degenerate, 1.0, cos_b)
    out = np.stack([sin_a, cos_a, sin_b, cos_b, dist], axis=-1)
    idx = np.arange(len(pos))
    out[idx, idx] = (0.0, 1.0, 0.0, 1.0, 0.0)
    return out
