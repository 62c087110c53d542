"""Scene records, their JSON form, validation and dataset directories."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, NamedTuple, Sequence

import numpy as np

SCENE_SUFFIX = ".scene.json"
MANIFEST_NAME = "manifest.json"
_MIN_SPACING = 1e-6


class AgentKind(str, Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"
    OTHER = "other"


class SceneError(Exception):
    """Base for load failures; ``path`` locates the offending field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class SceneParseError(SceneError):
    pass


class SceneSchemaError(SceneError):
    pass


class SceneValidationError(SceneError):
    def __init__(self, violations: Sequence["Violation"]):
        self.violations = list(violations)
        msg = "; ".join(f"{v.path}: {v.rule}" for v in self.violations)
        super().__init__(msg)
        self.path = self.violations[0].path if self.violations else ""


class Violation(NamedTuple):
    path: str
    rule: str


def _arrays_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and bool(np.array_equal(a, b))


@dataclass(frozen=True, eq=False)
class AgentTrack:
    """One agent: ``history`` rows are (x, y, hx, hy, valid), ``future`` rows (x, y, valid)."""

    id: str
    kind: AgentKind
    is_scored: bool
    is_focal: bool
    history: np.ndarray
    future: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "kind", AgentKind(self.kind))
        hist = np.array(self.history, dtype=np.float64).reshape(-1, 5)
        fut = np.array(self.future, dtype=np.float64).reshape(-1, 3)
        hist[:, 4] = hist[:, 4] != 0
        fut[:, 2] = fut[:, 2] != 0
        hist.setflags(write=False)
        fut.setflags(write=False)
        object.__setattr__(self, "history", hist)
        object.__setattr__(self, "future", fut)

    @property
    def history_valid(self) -> np.ndarray:
        return self.history[:, 4] > 0

    @property
    def future_valid(self) -> np.ndarray:
        return self.future[:, 2] > 0

    def anchor_index(self) -> int | None:
        """Index of the last valid history step."""
        idx = np.flatnonzero(self.history_valid)
        return int(idx[-1]) if idx.size else None

    def __eq__(self, other) -> bool:
        if not isinstance(other, AgentTrack):
            return NotImplemented
        return (
            (self.id, self.kind, self.is_scored, self.is_focal) == (other.id, other.kind, other.is_scored, other.is_focal)
            and _arrays_equal(self.history, other.history)
            and _arrays_equal(self.future, other.future)
        )


@dataclass(frozen=True, eq=False)
class LanePolyline:
    id: str
    centerline: np.ndarray

    def __post_init__(self):
        pts = np.array(self.centerline, dtype=np.float64).reshape(-1, 2)
        pts.setflags(write=False)
        object.__setattr__(self, "centerline", pts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LanePolyline):
            return NotImplemented
        return self.id == other.id and _arrays_equal(self.centerline, other.centerline)


@dataclass(frozen=True)
class Scene:
    scenario_id: str
    hz: float
    H: int
    T: int
    agents: tuple[AgentTrack, ...]
    lanes: tuple[LanePolyline, ...] = field(default_factory=tuple)
    focal_agent_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "lanes", tuple(self.lanes))
        object.__setattr__(self, "hz", float(self.hz))

    @property
    def num_agents(self) -> int:
        return len(self.agents)

    @property
    def num_lanes(self) -> int:
        return len(self.lanes)

    def focal_index(self) -> int:
        for i, a in enumerate(self.agents):
            if a.id == self.focal_agent_id:
                return i
        raise KeyError(f"focal agent {self.focal_agent_id!r} not in scene {self.scenario_id}")

    def scored_indices(self) -> list[int]:
        """Agents entering losses and metrics: flagged scored, >= 2 valid history steps, some valid future."""
        out = []
        for i, a in enumerate(self.agents):
            if a.is_scored and a.history_valid.sum() >= 2 and a.future_valid.any():
                out.append(i)
        return out

    def gt_future(self) -> tuple[np.ndarray, np.ndarray]:
        """``[A, T, 2]`` ground-truth positions and ``[A, T]`` validity."""
        fut = np.stack([a.future[:, :2] for a in self.agents])
        valid = np.stack([a.future_valid for a in self.agents])
        return fut, valid


# ---------------------------------------------------------------------------
# validation


def validate_scene(scene: Scene) -> list[Violation]:
    """Check every structural invariant; an empty list means the scene is usable."""
    out: list[Violation] = []
    if scene.H < 1:
        out.append(Violation("H", "must be >= 1"))
    if scene.T < 1:
        out.append(Violation("T", "must be >= 1"))
    if not scene.hz > 0:
        out.append(Violation("hz", "must be > 0"))
    if not scene.agents:
        out.append(Violation("agents", "scene needs at least one agent"))

    seen: dict[str, int] = {}
    for i, a in enumerate(scene.agents):
        p = f"agents[{i}]"
        if a.id in seen:
            out.append(Violation(f"{p}.id", f"duplicate agent id {a.id!r} (also agents[{seen[a.id]}])"))
        seen.setdefault(a.id, i)
        if a.history.shape[0] != scene.H:
            out.append(Violation(f"{p}.history", f"length {a.history.shape[0]} != H={scene.H}"))
        if a.future.shape[0] != scene.T:
            out.append(Violation(f"{p}.future", f"length {a.future.shape[0]} != T={scene.T}"))
        if not (np.isfinite(a.history).all() and np.isfinite(a.future).all()):
            out.append(Violation(p, "non-finite coordinate"))
        hvalid = a.history_valid
        if a.history.shape[0] and not hvalid.any():
            out.append(Violation(f"{p}.history", "agent has no valid history step to anchor its frame"))
        norms = np.hypot(a.history[:, 2], a.history[:, 3])
        bad_heading = np.flatnonzero(hvalid & ~(norms > 1e-6))
        if bad_heading.size:
            out.append(Violation(f"{p}.history[{bad_heading[0]}]", "valid step has a zero heading vector"))
        if a.is_focal and not a.is_scored:
            out.append(Violation(f"{p}.is_focal", f"focal agent {a.id!r} must be scored"))
        if a.is_scored and a.history.shape[0] and not hvalid[-1]:
            out.append(Violation(f"{p}.history[{a.history.shape[0] - 1}]", "last history step of a scored agent must be valid"))
        if a.is_scored and a.future.shape[0] and not a.future_valid.any():
            out.append(Violation(f"{p}.future", "scored agent has no valid future step"))
        if a.is_focal and hvalid.sum() < 2:
            out.append(Violation(f"{p}.history", "focal agent needs at least 2 valid history steps"))

    focal = [a.id for a in scene.agents if a.is_focal]
    if len(focal) != 1:
        out.append(Violation("agents", f"exactly one agent must be focal, found {len(focal)}: {focal}"))
    elif focal[0] != scene.focal_agent_id:
        out.append(Violation("focal_agent_id", f"{scene.focal_agent_id!r} does not name the focal agent {focal[0]!r}"))
    if scene.agents and not any(a.is_scored for a in scene.agents):
        out.append(Violation("agents", "at least one agent must be scored"))

    lane_ids: set[str] = set()
    for i, lane in enumerate(scene.lanes):
        p = f"lanes[{i}]"
        if lane.id in lane_ids:
            out.append(Violation(f"{p}.id", f"duplicate lane id {lane.id!r}"))
        lane_ids.add(lane.id)
        pts = lane.centerline
        if pts.shape[0] < 2:
            out.append(Violation(f"{p}.centerline", f"needs >= 2 points, got {pts.shape[0]}"))
            continue
        if not np.isfinite(pts).all():
            out.append(Violation(f"{p}.centerline", "non-finite coordinate"))
        gaps = np.hypot(*np.diff(pts, axis=0).T)
        close = np.flatnonzero(~(gaps > _MIN_SPACING))
        if close.size:
            out.append(Violation(f"{p}.centerline[{close[0] + 1}]", "coincides with the previous point"))
    return out


def check_scene(scene: Scene) -> Scene:
    violations = validate_scene(scene)
    if violations:
        raise SceneValidationError(violations)
    return scene


# ---------------------------------------------------------------------------
# JSON


def _fmt(v: float) -> str:
    # round first so tiny negatives do not print as -0.000000
    return f"{round(float(v), 6) + 0.0:.6f}"


def _row(values: Sequence[Any]) -> str:
    parts = []
    for v in values:
        parts.append(("true" if v else "false") if isinstance(v, (bool, np.bool_)) else _fmt(v))
    return "[" + ", ".join(parts) + "]"


def _rows(rows: list[str], indent: str) -> str:
    if not rows:
        return "[]"
    return "[\n" + ",\n".join(indent + r for r in rows) + "\n" + indent[:-2] + "]"


def _blocks(items: list[str]) -> str:
    return "[\n" + ",\n".join(items) + "\n  ]" if items else "[]"


def save_scene(scene: Scene) -> bytes:
    """Deterministic UTF-8 JSON: schema key order, floats with 6 decimals."""
    agents = []
    for a in scene.agents:
        hist = [_row([*r[:4], bool(r[4])]) for r in a.history]
        fut = [_row([r[0], r[1], bool(r[2])]) for r in a.future]
        agents.append(
            "    {\n"
            f'      "id": {json.dumps(a.id)},\n'
            f'      "kind": {json.dumps(a.kind.value)},\n'
            f'      "is_scored": {json.dumps(bool(a.is_scored))},\n'
            f'      "is_focal": {json.dumps(bool(a.is_focal))},\n'
            f'      "history": {_rows(hist, " " * 8)},\n'
            f'      "future": {_rows(fut, " " * 8)}\n'
            "    }"
        )
    lanes = []
    for lane in scene.lanes:
        pts = [_row(p) for p in lane.centerline]
        lanes.append("    {\n" f'      "id": {json.dumps(lane.id)},\n' f'      "centerline": {_rows(pts, " " * 8)}\n' "    }")
    body = (
        "{\n"
        f'  "scenario_id": {json.dumps(scene.scenario_id)},\n'
        f'  "hz": {_fmt(scene.hz)},\n'
        f'  "H": {int(scene.H)},\n'
        f'  "T": {int(scene.T)},\n'
        f'  "focal_agent_id": {json.dumps(scene.focal_agent_id)},\n'
        f'  "agents": {_blocks(agents)},\n'
        f'  "lanes": {_blocks(lanes)}\n'
        "}\n"
    )
    return body.encode("utf-8")


_SCENE_KEYS = ("scenario_id", "hz", "H", "T", "focal_agent_id", "agents", "lanes")
_AGENT_KEYS = ("id", "kind", "is_scored", "is_focal", "history", "future")
_LANE_KEYS = ("id", "centerline")


def _require_keys(obj: Any, keys: tuple[str, ...], path: str) -> None:
    if not isinstance(obj, dict):
        raise SceneSchemaError("expected an object", path)
    missing = [k for k in keys if k not in obj]
    if missing:
        raise SceneSchemaError(f"missing key(s) {missing}", path)
    extra = sorted(set(obj) - set(keys))
    if extra:
        raise SceneSchemaError(f"unexpected key(s) {extra}", path)


def _typed(value: Any, kind, path: str):
    if kind is bool:
        if not isinstance(value, bool):
            raise SceneSchemaError("expected true/false", path)
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise SceneSchemaError("expected an integer", path)
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SceneSchemaError("expected a number", path)
        return float(value)
    if not isinstance(value, str):
        raise SceneSchemaError("expected a string", path)
    return value


def _matrix(rows: Any, arity: int, path: str, flag_last: bool) -> np.ndarray:
    if not isinstance(rows, list):
        raise SceneSchemaError("expected a list of rows", path)
    out = np.zeros((len(rows), arity))
    for t, row in enumerate(rows):
        rp = f"{path}[{t}]"
        if not isinstance(row, list) or len(row) != arity:
            raise SceneSchemaError(f"expected {arity} values", rp)
        for c, v in enumerate(row):
            if flag_last and c == arity - 1:
                if isinstance(v, bool):
                    out[t, c] = float(v)
                elif v in (0, 1) and isinstance(v, int):
                    out[t, c] = float(v)
                else:
                    raise SceneSchemaError("validity flag must be true/false", f"{rp}[{c}]")
            else:
                out[t, c] = _typed(v, float, f"{rp}[{c}]")
    return out


def scene_from_obj(obj: Any) -> Scene:
    _require_keys(obj, _SCENE_KEYS, "")
    agents = []
    if not isinstance(obj["agents"], list):
        raise SceneSchemaError("expected a list", "agents")
    if not isinstance(obj["lanes"], list):
        raise SceneSchemaError("expected a list", "lanes")
    for i, a in enumerate(obj["agents"]):
        p = f"agents[{i}]"
        _require_keys(a, _AGENT_KEYS, p)
        kind = _typed(a["kind"], str, f"{p}.kind")
        try:
            kind = AgentKind(kind)
        except ValueError:
            raise SceneSchemaError(f"unknown agent kind {kind!r}", f"{p}.kind") from None
        agents.append(
            AgentTrack(
                id=_typed(a["id"], str, f"{p}.id"),
                kind=kind,
                is_scored=_typed(a["is_scored"], bool, f"{p}.is_scored"),
                is_focal=_typed(a["is_focal"], bool, f"{p}.is_focal"),
                history=_matrix(a["history"], 5, f"{p}.history", True),
                future=_matrix(a["future"], 3, f"{p}.future", True),
            )
        )
    lanes = []
    for i, lane in enumerate(obj["lanes"]):
        p = f"lanes[{i}]"
        _require_keys(lane, _LANE_KEYS, p)
        lanes.append(LanePolyline(_typed(lane["id"], str, f"{p}.id"), _matrix(lane["centerline"], 2, f"{p}.centerline", False)))
    return Scene(
        scenario_id=_typed(obj["scenario_id"], str, "scenario_id"),
        hz=_typed(obj["hz"], float, "hz"),
        H=_typed(obj["H"], int, "H"),
        T=_typed(obj["T"], int, "T"),
        agents=tuple(agents),
        lanes=tuple(lanes),
        focal_agent_id=_typed(obj["focal_agent_id"], str, "focal_agent_id"),
    )


def load_scene(data: bytes | str) -> Scene:
    """Parse, schema-check and validate one scene document."""
    try:
        obj = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SceneParseError(f"malformed JSON: {exc}") from exc
    return check_scene(scene_from_obj(obj))


def canonicalize(scene: Scene) -> Scene:
    """Round-trip through the text form so coordinates carry exactly 6 decimals."""
    return scene_from_obj(json.loads(save_scene(scene)))


# ---------------------------------------------------------------------------
# dataset directories


def scene_filename(scene: Scene) -> str:
    return f"{scene.scenario_id}{SCENE_SUFFIX}"


def save_dataset(directory: str | Path, scenes: Sequence[Scene], generator: dict | None = None, seed: int | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for s in scenes:
        name = scene_filename(s)
        (directory / name).write_bytes(save_scene(s))
        files.append(name)
    manifest = {"files": files, "generator": generator, "seed": seed}
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset(directory: str | Path) -> list[Scene]:
    directory = Path(directory)
    mpath = directory / MANIFEST_NAME
    if not mpath.is_file():
        raise SceneError(f"no {MANIFEST_NAME} in dataset directory {directory}")
    try:
        manifest = json.loads(mpath.read_text())
        files = manifest["files"]
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError) as exc:
        raise SceneParseError(f"{mpath}: unreadable dataset manifest ({exc})") from exc
    if not isinstance(files, list) or not all(isinstance(f, str) for f in files):
        raise SceneSchemaError(f"{mpath}: 'files' must be a list of file names")
    scenes = []
    for name in files:
        fpath = directory / name
        try:
            scenes.append(load_scene(fpath.read_bytes()))
        except FileNotFoundError:
            raise SceneError(f"listed scene file is missing: {fpath}") from None
        except SceneError as exc:
            exc.args = (f"{fpath}: {exc}",)
            raise
    return scenes

