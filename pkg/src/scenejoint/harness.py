"""Training loop, learning-rate schedule, checkpoints and the evaluation pipeline."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from scenejoint.losses import LOSS_MODES, LossConfig, compute_loss
from scenejoint.metrics import METHODS, EvalInput, EvalReport, MetricsConfig, avg_min_fde, evaluate_method
from scenejoint.model import ModelConfig, PreparedScene, ScenePrediction, SceneModel, collate, predict, prepare_scene
from scenejoint.scene_data import Scene, load_dataset
from scenejoint.tensor_ad import Tape, adam_step, checkpoint_id, clip_grad_norm, global_grad_norm

LOG_NAME = "train_log.jsonl"
TRAIN_CONFIG_NAME = "train_config.json"


class HarnessError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 20
    lr_initial: float = 1e-3
    lr_final: float = 1e-4
    lr_drop_epoch: int = 14
    seed: int = 0
    loss_mode: str = "scene_wta"
    data_dir: str | None = None
    out_dir: str | None = None
    clip_norm: float | None = 5.0
    omega: float = 0.9
    val_fraction: float = 0.1
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1 or not 0 <= self.lr_drop_epoch < self.epochs:
            raise ValueError(f"need 0 <= lr_drop_epoch < epochs, got {self.lr_drop_epoch} and {self.epochs}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive or None")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        LossConfig(self.omega)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        if isinstance(d.get("model"), dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Step schedule: ``lr_initial`` until ``lr_drop_epoch``, ``lr_final`` from then on."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    return config.lr_initial if epoch < config.lr_drop_epoch else config.lr_final


def is_validation(scenario_id: str, fraction: float = 0.1) -> bool:
    """Stable split by hash of the scenario id."""
    h = int.from_bytes(hashlib.sha256(scenario_id.encode()).digest()[:8], "big")
    return h / 2.0**64 < fraction


def split_dataset(scenes: Sequence[Scene], fraction: float = 0.1) -> tuple[list[Scene], list[Scene]]:
    train, val = [], []
    for s in scenes:
        (val if is_validation(s.scenario_id, fraction) else train).append(s)
    return train, val


def eval_inputs(scenes: Sequence[Scene], preds: Sequence[ScenePrediction]) -> list[EvalInput]:
    """Restrict each prediction to scored agents; the focal index refers to that subset."""
    items = []
    for scene, pred in zip(scenes, preds):
        scored = scene.scored_indices()
        gt, valid = scene.gt_future()
        items.append(
            EvalInput(
                scenario_id=scene.scenario_id,
                pred=pred.trajectories[scored].astype(np.float64),
                gt=gt[scored],
                valid=valid[scored],
                focal=scored.index(scene.focal_index()),
            )
        )
    return items


def mean_avg_min_fde(model: SceneModel, scenes: Sequence[Scene]) -> float:
    items = eval_inputs(scenes, predict(model, scenes))
    return math.fsum(avg_min_fde(it.pred, it.gt, it.valid)[0] for it in items) / len(items)


def _digest(array: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(array).tobytes()).hexdigest()[:16]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    model: SceneModel
    log: list[dict]
    best_epoch: int
    out_dir: Path | None


def train_step(model: SceneModel, batch_preps: Sequence[PreparedScene], config: TrainConfig, lr: float) -> tuple[dict, str]:
    tape = Tape(model.dtype)
    batch = collate(batch_preps, model.dtype)
    out = model.forward_batch(tape, batch)
    losses = compute_loss(
        out.trajectories, out.scene_logits, batch.gt, batch.gt_valid, batch.scored, config.loss_mode, LossConfig(config.omega)
    )
    tape.backward(losses.tensor)
    params = list(model.params)
    norm = clip_grad_norm(params, config.clip_norm) if config.clip_norm is not None else global_grad_norm(params)
    adam_step(params, lr)
    digest = _digest(out.trajectories.value)
    tape.clear()
    stats = {"total": losses.total, "reg": losses.reg, "cls": losses.cls, "grad_norm": norm}
    return stats, digest


def train(config: TrainConfig, scenes: Sequence[Scene] | None = None, progress=None) -> TrainResult:
    """Deterministic training; writes the log, per-epoch and best checkpoints when ``out_dir`` is set.

    Without validation scenes (tiny datasets) the best checkpoint is chosen on the training scenes.
    """
    if scenes is None:
        if config.data_dir is None:
            raise HarnessError("no dataset given")
        scenes = load_dataset(config.data_dir)
    scenes = sorted(scenes, key=lambda s: s.scenario_id)
    if not scenes:
        raise HarnessError("dataset is empty")
    mc = config.model
    for s in scenes:
        if s.H != mc.H or s.T != mc.T:
            raise HarnessError(f"{s.scenario_id}: H={s.H}, T={s.T} but the model expects H={mc.H}, T={mc.T}")
    train_scenes, val_scenes = split_dataset(scenes, config.val_fraction)
    if not train_scenes:
        train_scenes, val_scenes = list(scenes), []
    select_scenes = val_scenes or train_scenes

    out_dir = None
    if config.out_dir is not None:
        out_dir = Path(config.out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            _write_json(out_dir / TRAIN_CONFIG_NAME, config.to_dict())
        except OSError as exc:
            raise HarnessError(f"cannot write to checkpoint directory {out_dir}: {exc}") from exc
        (out_dir / LOG_NAME).write_text("")

    model = SceneModel(mc, seed=config.seed)
    preps = [prepare_scene(s) for s in train_scenes]
    log: list[dict] = []
    best_fde, best_epoch = math.inf, -1
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(preps))
        sums = {"total": 0.0, "reg": 0.0, "cls": 0.0}
        norms, first_digest = [], None
        nb = 0
        for start in range(0, len(order), config.batch_size):
            stats, digest = train_step(model, [preps[i] for i in order[start : start + config.batch_size]], config, lr)
            first_digest = first_digest or digest
            for key in sums:
                sums[key] += stats[key]
            norms.append(stats["grad_norm"])
            nb += 1
        val_fde = mean_avg_min_fde(model, select_scenes)
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss_total": sums["total"] / nb,
            "loss_reg": sums["reg"] / nb,
            "loss_cls": sums["cls"] / nb,
            "grad_norm_mean": float(np.mean(norms)),
            "grad_norm_max": float(np.max(norms)),
            "grad_norm_finite": bool(np.all(np.isfinite(norms))),
            "val_avg_min_fde": val_fde,
            "first_batch_digest": first_digest,
        }
        log.append(row)
        if val_fde < best_fde:
            best_fde, best_epoch = val_fde, epoch
        if out_dir is not None:
            with open(out_dir / LOG_NAME, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            model.save(out_dir / f"epoch_{epoch:03d}")
            if best_epoch == epoch:
                model.save(out_dir / "best")
                _write_json(out_dir / "best" / TRAIN_CONFIG_NAME, {**config.to_dict(), "best_epoch": epoch})
        if progress is not None:
            progress(row)
    return TrainResult(model, log, best_epoch, out_dir)


def initial_fde(config: TrainConfig, scenes: Sequence[Scene]) -> float:
    """Validation avgMinFDE of the freshly initialized model for ``config.seed``."""
    return mean_avg_min_fde(SceneModel(config.model, seed=config.seed), scenes)


@dataclass(frozen=True)
class EvalResult:
    reports: dict[str, EvalReport]
    checkpoint_id: str | None
    metrics: MetricsConfig
    predictions: list[ScenePrediction] = field(default_factory=list, repr=False)
    items: list[EvalInput] = field(default_factory=list, repr=False)


def evaluate(
    checkpoint: SceneModel | str | Path,
    scenes: Sequence[Scene],
    methods: Sequence[str] = METHODS,
    metrics: MetricsConfig = MetricsConfig(),
) -> EvalResult:
    """Predict every scene once, then score each requested world-assembly method."""
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
    if not scenes:
        raise HarnessError("cannot evaluate an empty dataset")
    if isinstance(checkpoint, SceneModel):
        model, ckpt = checkpoint, None
    else:
        model, ckpt = SceneModel.load(checkpoint), checkpoint_id(checkpoint)
    mc = model.config
    for s in scenes:
        if s.H != mc.H or s.T != mc.T:
            raise HarnessError(f"{s.scenario_id}: H={s.H}, T={s.T} do not match checkpoint H={mc.H}, T={mc.T}")
    if metrics.K != mc.K:
        metrics = replace(metrics, K=mc.K)
    scenes = sorted(scenes, key=lambda s: s.scenario_id)
    preds = predict(model, scenes)
    items = eval_inputs(scenes, preds)
    reports = {m: evaluate_method(items, m, metrics) for m in methods}
    return EvalResult(reports, ckpt, metrics, preds, items)
