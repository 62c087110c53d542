"""Seeded synthetic driving scenes: platoons, lane changes, merges and unsignalized crossings.

Each generated scene is kinematically smooth in its future, collision-free in
ground truth, and (for crossings and merges) ambiguous about who yields, so
that the joint future has several consistent modes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from scenejoint.metrics import detect_collision
from scenejoint.scene_data import AgentKind, AgentTrack, LanePolyline, Scene, canonicalize, check_scene

SCENARIO_KINDS = ("straight", "cross", "lanechange", "merge")
LANE_WIDTH = 3.5
MAX_LONG_ACCEL = 4.8
PAIR_CLEARANCE = 2.0  # metres beyond dist_safe kept by a yielding actor
MAX_ATTEMPTS = 60


class GenConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    num_scenes: int = 100
    agents_min: int = 2
    agents_max: int = 8
    mix: dict = field(default_factory=lambda: {k: 1.0 for k in SCENARIO_KINDS})
    H: int = 50
    T: int = 60
    hz: float = 10.0
    noise: float = 0.02
    dist_safe: float = 2.0

    def __post_init__(self):
        if not self.mix:
            raise GenConfigError("scenario mix is empty")
        unknown = set(self.mix) - set(SCENARIO_KINDS)
        if unknown:
            raise GenConfigError(f"unknown scenario kind(s) {sorted(unknown)}; expected {SCENARIO_KINDS}")
        if any(w < 0 for w in self.mix.values()) or not sum(self.mix.values()) > 0:
            raise GenConfigError("scenario weights must be non-negative with a positive total")
        for name in ("num_scenes", "agents_min", "agents_max", "H", "T"):
            if getattr(self, name) <= 0:
                raise GenConfigError(f"{name} must be positive")
        if self.agents_min < 2 or self.agents_max < self.agents_min:
            raise GenConfigError("agents range must satisfy 2 <= agents_min <= agents_max")
        if self.H < 2:
            raise GenConfigError("H must be at least 2")
        if not (self.hz > 0 and self.noise >= 0 and self.dist_safe > 0):
            raise GenConfigError("hz and dist_safe must be positive, noise non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mix"] = {k: float(self.mix[k]) for k in SCENARIO_KINDS if k in self.mix}
        return d


def parse_mix(text: str) -> dict:
    """``"straight,cross"`` (equal weights) or ``"cross=3,merge=1"``."""
    mix: dict[str, float] = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, _, weight = part.partition("=")
        mix[name.strip()] = float(weight) if weight else 1.0
    return mix


# ---------------------------------------------------------------------------
# geometry helpers


class Path:
    """Dense polyline with arc-length lookup; beyond either end it extends straight."""

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        seg = np.hypot(*np.diff(pts, axis=0).T)
        keep = np.concatenate([[True], seg > 1e-9])
        self.points = pts[keep]
        self.s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(self.points, axis=0).T))])
        d = np.diff(self.points, axis=0)
        self._tan = d / np.hypot(d[:, 0], d[:, 1])[:, None]

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def _segment(self, s: np.ndarray) -> np.ndarray:
        return np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self._tan) - 1)

    def point_at(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        i = self._segment(s)
        return self.points[i] + self._tan[i] * (s - self.s[i])[..., None]

    def tangent_at(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        # blend neighbouring segment directions to avoid heading jumps at vertices
        a = self._tan[self._segment(s - 0.25)]
        b = self._tan[self._segment(s + 0.25)]
        t = a + b
        return t / np.hypot(t[..., 0], t[..., 1])[..., None]

    def locate(self, point) -> float:
        """Arc length of the vertex nearest to ``point``."""
        d = np.hypot(*(self.points - np.asarray(point)).T)
        return float(self.s[np.argmin(d)])


def straight_path(start, direction, length: float, step: float = 0.5) -> Path:
    start = np.asarray(start, dtype=np.float64)
    u = np.asarray(direction, dtype=np.float64)
    u = u / np.hypot(*u)
    n = int(math.ceil(length / step)) + 1
    return Path(start + np.linspace(0, length, n)[:, None] * u)


def offset_blend_path(x_start: float, x_end: float, y_from: float, y_to: float, blend_start: float, blend_len: float, step: float = 0.5) -> Path:
    """Path along +x whose lateral offset moves from ``y_from`` to ``y_to`` with a cosine blend."""
    x = np.arange(x_start, x_end + step, step)
    u = np.clip((x - blend_start) / blend_len, 0.0, 1.0)
    y = y_from + (y_to - y_from) * 0.5 * (1 - np.cos(math.pi * u))
    return Path(np.stack([x, y], axis=1))


def lane_segments(path: Path, s_from: float, s_to: float, seg_len: float = 30.0, spacing: float = 3.0) -> list[np.ndarray]:
    out = []
    s = s_from
    while s < s_to - 1e-6:
        e = min(s + seg_len, s_to)
        n = max(2, int(round((e - s) / spacing)) + 1)
        out.append(path.point_at(np.linspace(s, e, n)))
        s = e
    return out


# ---------------------------------------------------------------------------
# motion


@dataclass
class Actor:
    path: Path
    s0: float
    v0: float
    a_hist: float = 0.0
    a_fut: float = 0.0
    v_max: float = 16.0
    kind: AgentKind = AgentKind.VEHICLE
    late_start: int = 0

    def arc(self, t: np.ndarray) -> np.ndarray:
        """Arc length at times ``t`` (seconds, 0 = present)."""
        t = np.asarray(t, dtype=np.float64)
        out = np.empty_like(t)
        past = t <= 0
        tp = t[past]
        out[past] = self.s0 + self.v0 * tp + 0.5 * self.a_hist * tp * tp
        tf = t[~past]
        a = self.a_fut
        if a < 0:
            t_stop = self.v0 / -a
            tt = np.minimum(tf, t_stop)
            out[~past] = self.s0 + self.v0 * tt + 0.5 * a * tt * tt
        elif a > 0 and self.v0 < self.v_max:
            t_cap = (self.v_max - self.v0) / a
            tt = np.minimum(tf, t_cap)
            out[~past] = self.s0 + self.v0 * tt + 0.5 * a * tt * tt + max(self.v_max, self.v0) * (tf - tt)
        else:
            out[~past] = self.s0 + self.v0 * tf
        return out


def _time_grids(cfg: GenConfig) -> tuple[np.ndarray, np.ndarray]:
    hist = (np.arange(cfg.H) - (cfg.H - 1)) / cfg.hz
    fut = np.arange(1, cfg.T + 1) / cfg.hz
    return hist, fut


# ---------------------------------------------------------------------------
# scenario builders (scene-local frame); each returns actors, lanes, focal, conflict pair


def _platoon(rng, path: Path, n: int, s_front: float, leader_accel: float) -> list[Actor]:
    v = rng.uniform(6.0, 11.0)
    out = []
    s = s_front
    for i in range(n):
        if i:
            s -= rng.uniform(14.0, 24.0)
        out.append(Actor(path, s, v + rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), leader_accel + rng.uniform(-0.2, 0.2)))
    return out


def _split(rng, total: int, parts: int) -> list[int]:
    counts = [0] * parts
    for _ in range(total):
        counts[int(rng.integers(parts))] += 1
    return counts


def _two_lane_road(x0=-120.0, x1=160.0):
    return [straight_path((x0, i * LANE_WIDTH), (1, 0), x1 - x0) for i in range(2)]


def build_straight(rng, n: int, cfg: GenConfig):
    lanes = _two_lane_road()
    actors = []
    for lane, count in zip(lanes, _split(rng, n, 2)):
        if count:
            mode = rng.choice([1.0, 0.0, -2.0])
            actors += _platoon(rng, lane, count, 120.0 + rng.uniform(-8, 8), float(mode))
    _maybe_pedestrian(rng, actors, cfg, n)
    vehicles = [i for i, a in enumerate(actors) if a.kind == AgentKind.VEHICLE]
    focal = vehicles[int(rng.integers(len(vehicles)))]
    return actors, lanes, (80.0, 200.0), focal, None


def _maybe_pedestrian(rng, actors: list[Actor], cfg: GenConfig, n: int) -> None:
    if n >= 3 and rng.random() < 0.15:
        walk = straight_path((-120.0, -7.0), (1, 0), 280.0)
        idx = int(rng.integers(1, n))
        actors[idx] = Actor(walk, 120.0 + rng.uniform(-10, 10), 1.4, 0.0, 0.0, 2.0, AgentKind.PEDESTRIAN)


def build_lanechange(rng, n: int, cfg: GenConfig):
    main = _two_lane_road()
    v = rng.uniform(6.0, 10.0)
    changes = rng.random() < 0.5
    s_now = 120.0
    x_now = -120.0 + s_now
    start = x_now + v * rng.uniform(0.0, 0.4)
    if changes:
        path = offset_blend_path(-120.0, 160.0, 0.0, LANE_WIDTH, start, v * rng.uniform(3.0, 4.0))
    else:
        path = main[0]
    changer = Actor(path, path.locate((x_now, 0.0)), v, rng.uniform(-0.2, 0.2), rng.uniform(-0.3, 0.5))
    actors = [changer]
    rest = n - 1
    if rest:
        # one target-lane vehicle reacts to the manoeuvre; the rest form platoons
        behind = Actor(main[1], s_now - rng.uniform(14.0, 20.0), v + rng.uniform(-0.5, 0.5), 0.0, -2.5 if changes else rng.uniform(-0.2, 0.6))
        actors.append(behind)
        rest -= 1
    if rest:
        counts = _split(rng, rest, 2)
        # ahead in the original lane, and further ahead in the target lane
        if counts[0]:
            actors += _platoon(rng, main[0], counts[0], s_now + 18.0 + 14.0 * counts[0] + rng.uniform(0, 6), 0.5)
        if counts[1]:
            actors += _platoon(rng, main[1], counts[1], s_now + 22.0 + 14.0 * counts[1] + rng.uniform(0, 6), 0.5)
    _maybe_pedestrian(rng, actors, cfg, n)
    return actors, main, (80.0, 200.0), 0, None


def _conflict_pair(rng, path_a: Path, s_conf_a: float, path_b: Path, s_conf_b: float, cfg: GenConfig, gap=(-0.15, 0.15), random_winner=True):
    """Two actors heading for a shared conflict point; one of them yields.

    ``gap`` is the arrival-time offset of b relative to a. With
    ``random_winner`` either may go first, otherwise the earlier arrival goes.
    The yielder brakes at least hard enough to keep ``PAIR_CLEARANCE`` metres
    beyond ``dist_safe`` from the other actor. Returns None when no feasible
    braking exists.
    """
    horizon = cfg.T / cfg.hz
    tau = rng.uniform(0.75, 1.0) * min(horizon, 2.0)
    va, vb = rng.uniform(3.0, 6.0), rng.uniform(3.0, 6.0)
    ta, tb = tau, tau + rng.uniform(*gap)
    a = Actor(path_a, s_conf_a - va * ta, va, rng.uniform(-0.2, 0.2))
    b = Actor(path_b, s_conf_b - vb * tb, vb, rng.uniform(-0.2, 0.2))
    go = rng.uniform(0.5, 2.0)
    a_first = rng.random() < 0.5 if random_winner else ta <= tb
    winner, yielder = (a, b) if a_first else (b, a)
    winner.a_fut = go
    clearance = cfg.dist_safe + PAIR_CLEARANCE
    for decel in np.linspace(0.0 if not random_winner else 1.0, MAX_LONG_ACCEL, 19):
        yielder.a_fut = -decel
        ph, _, pf = _rollout([a, b], cfg)
        if not detect_collision(np.concatenate([ph[:, -1:], pf], axis=1), clearance):
            break
    else:
        return None
    yielder.a_fut = -rng.uniform(decel, min(MAX_LONG_ACCEL, decel + 1.0))
    return a, b, go


def build_cross(rng, n: int, cfg: GenConfig):
    h = LANE_WIDTH / 2
    length = 260.0
    east = straight_path((-130.0, -h), (1, 0), length)
    west = straight_path((130.0, h), (-1, 0), length)
    north = straight_path((h, -130.0), (0, 1), length)
    south = straight_path((-h, 130.0), (0, -1), length)
    conflict = np.array([h, -h])
    pair = _conflict_pair(rng, east, east.locate(conflict), north, north.locate(conflict), cfg)
    if pair is None:
        return None
    a, b, go = pair
    actors = [a, b]
    rest = n - 2
    while rest > 0:
        choice = int(rng.integers(3))
        if choice < 2:
            lead = [x for x in actors if x.path is actors[choice].path][-1]
            actors.append(Actor(lead.path, lead.s0 - rng.uniform(14.0, 22.0), lead.v0, lead.a_hist, lead.a_fut))
        else:
            exit_path = west if rng.random() < 0.5 else south
            actors.append(Actor(exit_path, 130.0 + rng.uniform(10.0, 35.0), rng.uniform(5.0, 10.0), 0.0, rng.uniform(-0.5, 1.0)))
        rest -= 1
    return actors, [east, west, north, south], (85.0, 175.0), int(rng.integers(2)), (0, 1, go)


def build_merge(rng, n: int, cfg: GenConfig):
    main = straight_path((-120.0, 0.0), (1, 0), 280.0)
    merge_x = 30.0
    blend = rng.uniform(30.0, 40.0)
    lag = rng.uniform(0.9, 1.6)
    gap = (lag, lag) if rng.random() < 0.5 else (-lag, -lag)
    ramp = offset_blend_path(-120.0, 160.0, -4.5, 0.0, merge_x - blend, blend)
    pair = _conflict_pair(rng, main, main.locate((merge_x, 0.0)), ramp, ramp.locate((merge_x, 0.0)), cfg, gap, False)
    if pair is None:
        return None
    a, b, go = pair
    actors = [a, b]
    rest = n - 2
    if rest:
        counts = _split(rng, rest, 2)
        if counts[0]:
            actors += _platoon(rng, main, counts[0], main.locate((merge_x, 0.0)) + 20.0 + 14.0 * counts[0] + rng.uniform(0, 8), 1.0)
        for i in range(counts[1]):
            lead = actors[0] if i == 0 else actors[-1]
            actors.append(Actor(main, lead.s0 - rng.uniform(14.0, 22.0), lead.v0, lead.a_hist, lead.a_fut))
    return actors, [main, ramp], (100.0, 200.0), int(rng.integers(2)), None


BUILDERS = {"straight": build_straight, "cross": build_cross, "lanechange": build_lanechange, "merge": build_merge}


# ---------------------------------------------------------------------------
# assembly


def _rollout(actors: list[Actor], cfg: GenConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    th, tf = _time_grids(cfg)
    pos_h, head_h, pos_f = [], [], []
    for a in actors:
        sh, sf = a.arc(th), a.arc(tf)
        pos_h.append(a.path.point_at(sh))
        head_h.append(a.path.tangent_at(sh))
        pos_f.append(a.path.point_at(sf))
    return np.stack(pos_h), np.stack(head_h), np.stack(pos_f)


def _is_safe(pos_h: np.ndarray, pos_f: np.ndarray, cfg: GenConfig) -> bool:
    world = np.concatenate([pos_h[:, -1:], pos_f], axis=1)
    return not detect_collision(world, cfg.dist_safe + 0.5)


def _rigid(rng) -> tuple[np.ndarray, np.ndarray]:
    theta = rng.uniform(-math.pi, math.pi)
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]]), rng.uniform(-100.0, 100.0, size=2)


def generate_scene(cfg: GenConfig, seed: int, index: int) -> Scene:
    """The ``index``-th scene of the dataset for ``seed``; independent of every other index."""
    rng = np.random.default_rng([int(seed), int(index)])
    kinds = [k for k in SCENARIO_KINDS if cfg.mix.get(k, 0) > 0]
    weights = np.array([cfg.mix[k] for k in kinds], dtype=np.float64)
    kind = kinds[int(rng.choice(len(kinds), p=weights / weights.sum()))]
    n = int(rng.integers(cfg.agents_min, cfg.agents_max + 1))
    for attempt in range(MAX_ATTEMPTS * 4):
        built = BUILDERS[kind](rng, n, cfg)
        if built is None:
            continue
        actors, lane_paths, lane_range, focal, conflict = built
        pos_h, head_h, pos_f = _rollout(actors, cfg)
        if not _is_safe(pos_h, pos_f, cfg):
            if attempt % MAX_ATTEMPTS == MAX_ATTEMPTS - 1 and n > 2:
                n -= 1
            continue
        if conflict is not None:
            # both agents proceeding must collide, otherwise nothing is ambiguous
            i, j, go = conflict
            both = [Actor(a.path, a.s0, a.v0, a.a_hist, go) for a in (actors[i], actors[j])]
            _, _, pf = _rollout(both, cfg)
            if not detect_collision(pf, cfg.dist_safe):
                continue
        break
    else:
        raise RuntimeError(f"could not generate a collision-free {kind} scene (seed={seed}, index={index})")
    return _to_scene(rng, cfg, seed, index, kind, actors, lane_paths, lane_range, focal, pos_h, head_h, pos_f)


def _to_scene(rng, cfg, seed, index, kind, actors, lane_paths, lane_range, focal, pos_h, head_h, pos_f) -> Scene:
    rot, shift = _rigid(rng)
    pos_h = pos_h + rng.normal(0.0, cfg.noise, size=pos_h.shape) if cfg.noise > 0 else pos_h
    pos_h = pos_h @ rot.T + shift
    head_h = head_h @ rot.T
    pos_f = pos_f @ rot.T + shift
    agents = []
    for i, a in enumerate(actors):
        valid = np.ones(cfg.H, dtype=bool)
        if i != focal and rng.random() < 0.15:
            valid[: int(rng.integers(1, cfg.H - 1))] = False
        hist = np.concatenate([pos_h[i], head_h[i], valid[:, None]], axis=1)
        hist[~valid, :4] = 0.0
        fut = np.concatenate([pos_f[i], np.ones((cfg.T, 1))], axis=1)
        is_vehicle = a.kind == AgentKind.VEHICLE
        agents.append(
            AgentTrack(
                id=f"a{i}",
                kind=a.kind,
                is_scored=is_vehicle,
                is_focal=i == focal,
                history=hist,
                future=fut,
            )
        )
    lanes = []
    for li, path in enumerate(lane_paths):
        for si, pts in enumerate(lane_segments(path, *lane_range)):
            lanes.append(LanePolyline(f"l{li}-{si}", pts @ rot.T + shift))
    scene = Scene(
        scenario_id=f"{kind}-s{seed}-{index:06d}",
        hz=cfg.hz,
        H=cfg.H,
        T=cfg.T,
        agents=tuple(agents),
        lanes=tuple(lanes),
        focal_agent_id=f"a{focal}",
    )
    return check_scene(canonicalize(scene))


def generate_synthetic_dataset(config: GenConfig, seed: int) -> list[Scene]:
    return [generate_scene(config, seed, i) for i in range(config.num_scenes)]


def scenario_kind(scene: Scene) -> str:
    return scene.scenario_id.split("-", 1)[0]
