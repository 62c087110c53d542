"""Instance-centric encoder, symmetric fusion layers and the multimodal scene decoder.

Scenes are processed in padded batches. Inside a batch every scene lists its
agents, then its lanes, each group sorted by id; predictions are mapped back
to the scene's own agent order on the way out, which makes the network
exactly equivariant to agent reordering.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path as FsPath
from typing import Sequence

import numpy as np

from scenejoint.geom import Pose2, rpe_from_arrays, transform_to_frame
from scenejoint.scene_data import Scene
from scenejoint.tensor_ad import (
    AttentionParams,
    ParamStore,
    Tape,
    Tensor,
    layer_norm,
    load_into,
    mlp_forward,
    multihead_attention,
    ops,
    save_checkpoint,
)

AGENT_FEATURES = 7  # x, y, hx, hy, dx, dy, valid in the agent frame
LANE_FEATURES = 5  # x, y, tx, ty, centred arc fraction in the lane frame
POS_SCALE = 0.1  # metres -> network units for positions and distances
OUT_SCALE = 10.0  # network units -> metres for decoded offsets
CONFIG_NAME = "config.json"


@dataclass(frozen=True)
class ModelConfig:
    D: int = 32
    sft_layers: int = 2
    heads: int = 4
    K: int = 6
    H: int = 10
    T: int = 15
    mlp_hidden: int = 64

    def __post_init__(self):
        if self.D % self.heads:
            raise ValueError(f"D={self.D} must be divisible by heads={self.heads}")
        if self.K < 1 or self.sft_layers < 0 or self.H < 1 or self.T < 1:
            raise ValueError("K, H, T must be >= 1 and sft_layers >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


# ---------------------------------------------------------------------------
# per-scene preprocessing (float64 geometry, cast at the end)


@dataclass(frozen=True, eq=False)
class PreparedScene:
    scenario_id: str
    agent_order: np.ndarray  # canonical position -> index in scene.agents
    agent_feats: np.ndarray  # [A, H, 7]
    anchor_pos: np.ndarray  # [A, 2]
    anchor_head: np.ndarray  # [A, 2]
    lane_feats: list[np.ndarray]  # per lane [P_l, 5]
    lane_pos: np.ndarray  # [L, 2]
    lane_head: np.ndarray  # [L, 2]
    gt: np.ndarray  # [A, T, 2] canonical order
    gt_valid: np.ndarray  # [A, T]
    scored: np.ndarray  # [A] bool
    focal: int  # canonical index of the focal agent


def agent_frame(history: np.ndarray) -> Pose2:
    """Pose at the last valid history step."""
    valid = np.flatnonzero(history[:, 4] > 0)
    if valid.size == 0:
        raise ValueError("agent has no valid history step")
    row = history[valid[-1]]
    return Pose2(row[:2], row[2:4])


def agent_features(history: np.ndarray, frame: Pose2) -> np.ndarray:
    valid = history[:, 4] > 0
    pos = transform_to_frame(history[:, :2], frame)
    head = history[:, 2:4] @ frame.rotation
    norms = np.hypot(head[:, 0], head[:, 1])
    head = head / np.where(norms > 0, norms, 1.0)[:, None]
    disp = np.zeros_like(pos)
    both = valid[1:] & valid[:-1]
    disp[1:][both] = (pos[1:] - pos[:-1])[both]
    feats = np.concatenate([pos * POS_SCALE, head, disp * POS_SCALE * 10.0, valid[:, None].astype(np.float64)], axis=1)
    feats[~valid] = 0.0
    return feats


def lane_frame(centerline: np.ndarray) -> Pose2:
    """Anchored at the arc-length midpoint, heading along the end-to-start chord."""
    pts = np.asarray(centerline, dtype=np.float64)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    half = s[-1] / 2
    mid = np.array([np.interp(half, s, pts[:, 0]), np.interp(half, s, pts[:, 1])])
    chord = pts[0] - pts[-1]
    if np.hypot(*chord) < 1e-6:
        nz = np.flatnonzero(seg > 1e-9)
        chord = pts[nz[0]] - pts[nz[0] + 1] if nz.size else np.array([1.0, 0.0])
    return Pose2(mid, chord)


def lane_features(centerline: np.ndarray, frame: Pose2) -> np.ndarray:
    """Per point: local position, direction to the next distinct point, centred arc fraction.

    Repeated points get identical rows, so max-pooling ignores duplicates.
    """
    pts = transform_to_frame(centerline, frame)
    n = len(pts)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1] if s[-1] > 0 else 1.0
    tang = np.zeros((n, 2))
    for i in range(n):
        j = i + 1
        while j < n and np.hypot(*(pts[j] - pts[i])) <= 1e-9:
            j += 1
        if j < n:
            d = pts[j] - pts[i]
        else:
            k = i - 1
            while k >= 0 and np.hypot(*(pts[i] - pts[k])) <= 1e-9:
                k -= 1
            d = pts[i] - pts[k] if k >= 0 else np.array([1.0, 0.0])
        tang[i] = d / np.hypot(*d)
    return np.concatenate([pts * POS_SCALE, tang, (s / total - 0.5)[:, None]], axis=1)


def prepare_scene(scene: Scene) -> PreparedScene:
    order = np.array(sorted(range(scene.num_agents), key=lambda i: scene.agents[i].id), dtype=np.int64)
    agents = [scene.agents[i] for i in order]
    frames = [agent_frame(a.history) for a in agents]
    feats = np.stack([agent_features(a.history, f) for a, f in zip(agents, frames)])
    lanes = sorted(scene.lanes, key=lambda l: l.id)
    lframes = [lane_frame(l.centerline) for l in lanes]
    lfeats = [lane_features(l.centerline, f) for l, f in zip(lanes, lframes)]
    gt, gt_valid = scene.gt_future()
    scored = np.zeros(scene.num_agents, dtype=bool)
    scored[scene.scored_indices()] = True
    inv = np.argsort(order)
    return PreparedScene(
        scenario_id=scene.scenario_id,
        agent_order=order,
        agent_feats=feats,
        anchor_pos=np.array([f.position for f in frames]),
        anchor_head=np.array([f.heading_vector for f in frames]),
        lane_feats=lfeats,
        lane_pos=np.array([f.position for f in lframes]).reshape(-1, 2),
        lane_head=np.array([f.heading_vector for f in lframes]).reshape(-1, 2),
        gt=gt[order],
        gt_valid=gt_valid[order],
        scored=scored[order],
        focal=int(inv[scene.focal_index()]),
    )


@dataclass(eq=False)
class SceneBatch:
    preps: list[PreparedScene]
    agent_feats: np.ndarray  # [B, A, H, 7]
    agent_mask: np.ndarray  # [B, A]
    lane_feats: np.ndarray  # [B, L, P, 5]
    lane_mask: np.ndarray  # [B, L]
    rpe: np.ndarray  # [B, N, N, 5]
    anchor_rot: np.ndarray  # [B, A, 2, 2] local->global, transposed for row vectors
    anchor_pos: np.ndarray  # [B, A, 2]
    gt: np.ndarray  # [B, A, T, 2]
    gt_valid: np.ndarray  # [B, A, T]
    scored: np.ndarray  # [B, A]

    @property
    def size(self) -> int:
        return len(self.preps)

    @property
    def token_mask(self) -> np.ndarray:
        return np.concatenate([self.agent_mask, self.lane_mask], axis=1)


def collate(preps: Sequence[PreparedScene], dtype=np.float32) -> SceneBatch:
    preps = list(preps)
    b = len(preps)
    a_max = max(p.agent_feats.shape[0] for p in preps)
    l_max = max(len(p.lane_feats) for p in preps)
    p_max = max([f.shape[0] for p in preps for f in p.lane_feats], default=1)
    h = preps[0].agent_feats.shape[1]
    t = preps[0].gt.shape[1]
    n = a_max + l_max
    agent_feats = np.zeros((b, a_max, h, AGENT_FEATURES))
    agent_mask = np.zeros((b, a_max), dtype=bool)
    lane_feats = np.zeros((b, l_max, p_max, LANE_FEATURES))
    lane_mask = np.zeros((b, l_max), dtype=bool)
    rpe = np.zeros((b, n, n, 5))
    rpe[..., 1] = 1.0
    rpe[..., 3] = 1.0
    rot = np.zeros((b, a_max, 2, 2))
    rot[..., 0, 0] = rot[..., 1, 1] = 1.0
    pos = np.zeros((b, a_max, 2))
    gt = np.zeros((b, a_max, t, 2))
    gt_valid = np.zeros((b, a_max, t), dtype=bool)
    scored = np.zeros((b, a_max), dtype=bool)
    for i, p in enumerate(preps):
        na, nl = p.agent_feats.shape[0], len(p.lane_feats)
        if p.agent_feats.shape[1] != h or p.gt.shape[1] != t:
            raise ValueError(f"{p.scenario_id}: H/T differ within one batch")
        agent_feats[i, :na] = p.agent_feats
        agent_mask[i, :na] = True
        for j, lf in enumerate(p.lane_feats):
            lane_feats[i, j, : lf.shape[0]] = lf
            lane_feats[i, j, lf.shape[0] :] = lf[-1]  # repeat the last point: max-pool is unchanged
        lane_mask[i, :nl] = True
        idx = np.concatenate([np.arange(na), a_max + np.arange(nl)]).astype(np.int64)
        inst_pos = np.concatenate([p.anchor_pos, p.lane_pos])
        inst_head = np.concatenate([p.anchor_head, p.lane_head])
        rpe[i][np.ix_(idx, idx)] = rpe_from_arrays(inst_pos, inst_head)
        c, s = p.anchor_head[:, 0], p.anchor_head[:, 1]
        # row-vector form: global = local @ R^T
        rot[i, :na] = np.stack([np.stack([c, s], -1), np.stack([-s, c], -1)], -2)
        pos[i, :na] = p.anchor_pos
        gt[i, :na] = p.gt
        gt_valid[i, :na] = p.gt_valid
        scored[i, :na] = p.scored
    return SceneBatch(
        preps=preps,
        agent_feats=agent_feats.astype(dtype),
        agent_mask=agent_mask,
        lane_feats=lane_feats.astype(dtype),
        lane_mask=lane_mask,
        rpe=rpe,
        anchor_rot=rot.astype(dtype),
        anchor_pos=pos.astype(dtype),
        gt=gt,
        gt_valid=gt_valid,
        scored=scored,
    )


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class FusionTokens:
    tokens: Tensor  # [B, N, D]; agents first
    rpe: np.ndarray  # [B, N, N, 5]
    agent_count: int
    token_mask: np.ndarray  # [B, N]


@dataclass(frozen=True)
class SFTLayer:
    rpe_lift: list
    fuse: list
    attention: AttentionParams
    ln1: tuple
    ffn: list
    ln2: tuple


@dataclass(eq=False)
class BatchOutput:
    trajectories: Tensor  # [B, A, K, T, 2] global frame, canonical agent order
    scene_logits: Tensor  # [B, K]
    agent_tokens: Tensor  # [B, A, D]
    batch: SceneBatch


@dataclass(eq=False)
class ScenePrediction:
    """One scene's joint output in the scene's agent order.

    ``tensors`` keeps the tape handles of the batched forward pass that
    produced it (canonical order), for losses and gradient checks.
    """

    trajectories: np.ndarray  # [N_agent, K, T, 2]
    scene_logits: np.ndarray  # [K]
    scene_probs: np.ndarray  # [K]
    agent_ids: tuple[str, ...]
    tensors: BatchOutput | None = field(default=None, repr=False)


class SceneModel:
    """Parameters plus the forward pass; parameters are created in a fixed order from ``seed``."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        d, hid = config.D, config.mlp_hidden
        st = ParamStore(seed, dtype)
        self.params = st
        self.agent_step = st.mlp("agent.step", [AGENT_FEATURES, d], final_activation="relu")
        self.agent_conv = [st.mlp(f"agent.conv{i}", [3 * d, d], final_activation="relu") for i in range(2)]
        self.agent_out = st.mlp("agent.out", [d, d])
        self.lane_point = st.mlp("lane.point", [LANE_FEATURES, d, d], final_activation="relu")
        self.lane_out = st.mlp("lane.out", [d, d])
        self.layers = []
        for i in range(config.sft_layers):
            p = f"sft{i}"
            self.layers.append(
                SFTLayer(
                    rpe_lift=st.mlp(f"{p}.rpe", [5, d, d], final_activation="relu"),
                    fuse=st.mlp(f"{p}.fuse", [3 * d, d, d]),
                    attention=AttentionParams.create(st, f"{p}.att", d),
                    ln1=st.layer_norm(f"{p}.ln1", d),
                    ffn=st.mlp(f"{p}.ffn", [d, hid, d]),
                    ln2=st.layer_norm(f"{p}.ln2", d),
                )
            )
        self.heads = [st.mlp(f"dec.mode{k}", [d, hid, 2 * config.T]) for k in range(config.K)]
        self.score_head = st.mlp("dec.score", [d, hid, config.K])

    # -- persistence -------------------------------------------------------

    def save(self, directory) -> FsPath:
        directory = save_checkpoint(directory, self.params)
        (directory / CONFIG_NAME).write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory) -> "SceneModel":
        directory = FsPath(directory)
        cpath = directory / CONFIG_NAME
        if not cpath.is_file():
            from scenejoint.tensor_ad import CheckpointError

            raise CheckpointError(f"no checkpoint at {directory} (missing {CONFIG_NAME})")
        model = cls(ModelConfig.from_dict(json.loads(cpath.read_text())))
        load_into(model.params, directory)
        return model

    # -- components --------------------------------------------------------

    def encode_agents(self, tape: Tape, batch: SceneBatch) -> Tensor:
        b, a, h, c = batch.agent_feats.shape
        d = self.config.D
        x = mlp_forward(tape, tape.constant(batch.agent_feats.reshape(b * a, h, c)), self.agent_step)
        for conv in self.agent_conv:
            padded = ops.pad(x, 1, 1, 1)
            window = ops.concat([ops.index(padded, (slice(None), slice(o, o + h))) for o in range(3)], axis=-1)
            x = mlp_forward(tape, window, conv)
        pooled = ops.max(x, axis=1)
        out = mlp_forward(tape, pooled, self.agent_out)
        return ops.reshape(out, (b, a, d))

    def encode_lanes(self, tape: Tape, batch: SceneBatch) -> Tensor | None:
        b, l, p, c = batch.lane_feats.shape
        if l == 0:
            return None
        x = mlp_forward(tape, tape.constant(batch.lane_feats.reshape(b * l, p, c)), self.lane_point)
        out = mlp_forward(tape, ops.max(x, axis=1), self.lane_out)
        return ops.reshape(out, (b, l, self.config.D))

    def fuse(self, tape: Tape, fused: FusionTokens, layer: SFTLayer) -> FusionTokens:
        f = fused.tokens
        b, n, d = f.shape
        rpe = fused.rpe.copy()
        rpe[..., 4] *= POS_SCALE
        r = mlp_forward(tape, tape.constant(rpe), layer.rpe_lift)
        fi = ops.repeat(ops.reshape(f, (b, n, 1, d)), n, axis=2)
        fj = ops.repeat(ops.reshape(f, (b, 1, n, d)), n, axis=1)
        e = mlp_forward(tape, ops.concat([fi, fj, r], axis=-1), layer.fuse)
        query = ops.reshape(f, (b * n, 1, d))
        kv = ops.reshape(e, (b * n, n, d))
        key_mask = np.repeat(fused.token_mask[:, None, :], n, axis=1).reshape(b * n, n)
        att = ops.reshape(multihead_attention(tape, query, kv, kv, self.config.heads, layer.attention, key_mask), (b, n, d))
        h1 = layer_norm(tape, ops.add(f, att), *layer.ln1)
        h2 = layer_norm(tape, ops.add(h1, mlp_forward(tape, h1, layer.ffn)), *layer.ln2)
        return FusionTokens(h2, fused.rpe, fused.agent_count, fused.token_mask)

    def decode(self, tape: Tape, agent_tokens: Tensor, batch: SceneBatch) -> tuple[Tensor, Tensor]:
        cfg = self.config
        b, a, d = agent_tokens.shape
        modes = [ops.reshape(mlp_forward(tape, agent_tokens, head), (b, a, 1, 2 * cfg.T)) for head in self.heads]
        local = ops.scale(ops.reshape(ops.concat(modes, axis=2), (b * a, cfg.K * cfg.T, 2)), OUT_SCALE)
        rotated = ops.matmul(local, batch.anchor_rot.reshape(b * a, 2, 2))
        offset = np.broadcast_to(batch.anchor_pos[:, :, None, None, :], (b, a, cfg.K, cfg.T, 2))
        traj = ops.add(ops.reshape(rotated, (b, a, cfg.K, cfg.T, 2)), offset)
        mask = batch.agent_mask.astype(self.dtype)
        pooled = ops.sum(ops.mul(agent_tokens, np.broadcast_to(mask[:, :, None], (b, a, d))), axis=1)
        inv_count = 1.0 / mask.sum(axis=1)
        pooled = ops.mul(pooled, np.broadcast_to(inv_count[:, None], (b, d)).astype(self.dtype))
        logits = mlp_forward(tape, pooled, self.score_head)
        return traj, logits

    def forward_batch(self, tape: Tape, batch: SceneBatch) -> BatchOutput:
        cfg = self.config
        h = batch.agent_feats.shape[2]
        t = batch.gt.shape[2]
        if h != cfg.H or t != cfg.T:
            raise ValueError(f"scene H={h}, T={t} do not match model H={cfg.H}, T={cfg.T}")
        agents = self.encode_agents(tape, batch)
        lanes = self.encode_lanes(tape, batch)
        tokens = agents if lanes is None else ops.concat([agents, lanes], axis=1)
        fused = FusionTokens(tokens, batch.rpe, agents.shape[1], batch.token_mask)
        for layer in self.layers:
            fused = self.fuse(tape, fused, layer)
        a = fused.agent_count
        agent_tokens = fused.tokens if lanes is None else ops.index(fused.tokens, (slice(None), slice(0, a)))
        traj, logits = self.decode(tape, agent_tokens, batch)
        return BatchOutput(traj, logits, agent_tokens, batch)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def split_predictions(out: BatchOutput, scenes: Sequence[Scene]) -> list[ScenePrediction]:
    """Per-scene predictions in each scene's own agent order."""
    traj = out.trajectories.value
    logits = out.scene_logits.value
    preds = []
    for i, (scene, prep) in enumerate(zip(scenes, out.batch.preps)):
        na = len(prep.agent_order)
        canon = traj[i, :na]
        ordered = np.empty_like(canon)
        ordered[prep.agent_order] = canon
        preds.append(
            ScenePrediction(
                trajectories=ordered,
                scene_logits=logits[i].copy(),
                scene_probs=softmax_np(logits[i]),
                agent_ids=tuple(a.id for a in scene.agents),
                tensors=out,
            )
        )
    return preds


def model_forward(scene: Scene, model: SceneModel, tape: Tape | None = None) -> ScenePrediction:
    tape = Tape(model.dtype) if tape is None else tape
    out = model.forward_batch(tape, collate([prepare_scene(scene)], model.dtype))
    return split_predictions(out, [scene])[0]


def predict(model: SceneModel, scenes: Sequence[Scene], batch_size: int = 32) -> list[ScenePrediction]:
    out = []
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i : i + batch_size]
        tape = Tape(model.dtype)
        res = model.forward_batch(tape, collate([prepare_scene(s) for s in chunk], model.dtype))
        for p in split_predictions(res, chunk):
            p.tensors = None
            out.append(p)
        tape.clear()
    return out
