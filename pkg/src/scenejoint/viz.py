"""Deterministic SVG rendering of a scene, its predicted modes and the first collision of a chosen world."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from scenejoint.metrics import first_collision
from scenejoint.model import ScenePrediction
from scenejoint.scene_data import Scene

MARGIN = 10.0
LANE_COLOR = "#b4b4b4"
FOCAL_COLOR = "#d62728"
OTHER_COLOR = "#7f7f7f"
# start/end colours of each mode's gradient, cycled when K exceeds the palette
MODE_RAMPS = (
    ("#08306b", "#9ecae1"),
    ("#00441b", "#a1d99b"),
    ("#7f2704", "#fdae6b"),
    ("#3f007d", "#bcbddc"),
    ("#67000d", "#fc9272"),
    ("#252525", "#bdbdbd"),
)


def _f(v: float) -> str:
    return f"{float(v) + 0.0:.2f}"


def _points(xy: np.ndarray) -> str:
    # y is flipped so north points up
    return " ".join(f"{_f(x)},{_f(-y)}" for x, y in xy)


def _bounds(chunks: Sequence[np.ndarray]) -> tuple[float, float, float, float]:
    pts = np.concatenate([c.reshape(-1, 2) for c in chunks if c.size])
    lo, hi = pts.min(axis=0) - MARGIN, pts.max(axis=0) + MARGIN
    return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])


def viz_svg(
    scene: Scene,
    prediction: ScenePrediction | None = None,
    selected_world: int | None = None,
    dist_safe: float = 2.0,
) -> bytes:
    """Lanes in gray, the focal agent in red, other agents in gray, one gradient polyline per predicted mode.

    When ``selected_world`` names a mode, that world (restricted to scored
    agents, as in the metrics) is drawn on top and its first collision, if
    any, is circled.
    """
    hist = [a.history[a.history_valid, :2] for a in scene.agents]
    fut = [a.future[a.future_valid, :2] for a in scene.agents]
    chunks = [l.centerline for l in scene.lanes] + hist + fut
    if prediction is not None:
        chunks.append(prediction.trajectories)
    x0, y0, x1, y1 = _bounds(chunks)
    width, height = x1 - x0, y1 - y0
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{_f(x0)} {_f(-y1)} {_f(width)} {_f(height)}" '
        f'width="{_f(width * 8)}" height="{_f(height * 8)}">',
        f"<title>{scene.scenario_id}</title>",
    ]
    defs, body = [], []
    body.append(f'<rect x="{_f(x0)}" y="{_f(-y1)}" width="{_f(width)}" height="{_f(height)}" fill="#ffffff"/>')
    body.append('<g class="lanes">')
    for lane in scene.lanes:
        body.append(
            f'<polyline class="lane" data-id="{lane.id}" points="{_points(lane.centerline)}" '
            f'fill="none" stroke="{LANE_COLOR}" stroke-width="0.3"/>'
        )
    body.append("</g>")

    if prediction is not None:
        body.append('<g class="predictions">')
        traj = np.asarray(prediction.trajectories, dtype=np.float64)
        for i, agent in enumerate(scene.agents):
            for k in range(traj.shape[1]):
                start, end = MODE_RAMPS[k % len(MODE_RAMPS)]
                path = traj[i, k]
                gid = f"g{i}m{k}"
                defs.append(
                    f'<linearGradient id="{gid}" gradientUnits="userSpaceOnUse" '
                    f'x1="{_f(path[0, 0])}" y1="{_f(-path[0, 1])}" x2="{_f(path[-1, 0])}" y2="{_f(-path[-1, 1])}">'
                    f'<stop offset="0" stop-color="{start}"/><stop offset="1" stop-color="{end}"/></linearGradient>'
                )
                body.append(
                    f'<polyline class="mode" data-agent="{agent.id}" data-mode="{k}" points="{_points(path)}" '
                    f'fill="none" stroke="url(#{gid})" stroke-width="0.25"/>'
                )
        body.append("</g>")

    body.append('<g class="agents">')
    for agent, h, f in zip(scene.agents, hist, fut):
        color = FOCAL_COLOR if agent.is_focal else OTHER_COLOR
        if len(h) > 1:
            body.append(f'<polyline class="history" points="{_points(h)}" fill="none" stroke="{color}" stroke-width="0.4"/>')
        if len(f):
            body.append(
                f'<polyline class="ground-truth" points="{_points(f)}" fill="none" stroke="{color}" '
                f'stroke-width="0.2" stroke-dasharray="0.6 0.4"/>'
            )
        x, y = h[-1]
        body.append(f'<circle class="agent" data-id="{agent.id}" cx="{_f(x)}" cy="{_f(-y)}" r="1.00" fill="{color}"/>')
    body.append("</g>")

    if prediction is not None and selected_world is not None:
        k = int(selected_world)
        if not 0 <= k < prediction.trajectories.shape[1]:
            raise IndexError(f"world {k} outside [0, {prediction.trajectories.shape[1]})")
        scored = scene.scored_indices()
        world = np.asarray(prediction.trajectories, dtype=np.float64)[scored, k]
        body.append(f'<g class="selected-world" data-world="{k}">')
        for i, path in zip(scored, world):
            color = FOCAL_COLOR if scene.agents[i].is_focal else OTHER_COLOR
            body.append(f'<polyline class="world" points="{_points(path)}" fill="none" stroke="{color}" stroke-width="0.5"/>')
        hit = first_collision(world, dist_safe)
        if hit is not None:
            t, i, j = hit
            cx, cy = (world[i, t] + world[j, t]) / 2
            body.append(
                f'<circle class="collision" data-t="{t}" data-agents="{scene.agents[scored[i]].id},{scene.agents[scored[j]].id}" '
                f'cx="{_f(cx)}" cy="{_f(-cy)}" r="{_f(dist_safe)}" fill="none" stroke="{FOCAL_COLOR}" stroke-width="0.4"/>'
            )
        body.append("</g>")

    if defs:
        out.append("<defs>")
        out += defs
        out.append("</defs>")
    out += body
    out.append("</svg>")
    return ("\n".join(out) + "\n").encode()
