"""``scenejoint`` command line: gen, train, eval and viz.

Exit codes: 0 success, 1 usage error, 2 data or validation error. Every
command checks its inputs before it writes anything.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path
from typing import Sequence

log = logging.getLogger("scenejoint")

THREADS_ENV = "SCENEJOINT_THREADS"
METHOD_ALIASES = {"scene": "scene_joint", "marginal": "straight_marginal", "combined": "combined_joint"}
LOSS_ALIASES = {"scene": "scene_wta", "marginal": "marginal_wta"}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _agents_range(text: str) -> tuple[int, int]:
    lo, sep, hi = text.partition(":")
    try:
        return (int(lo), int(hi)) if sep else (int(lo), int(lo))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN:MAX, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scenejoint", description="Scene-consistent multi-agent trajectory prediction.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--num", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--agents", type=_agents_range, default=(2, 8), metavar="MIN:MAX")
    g.add_argument("--mix", default="straight,cross,lanechange,merge", help="kinds, optionally weighted: cross=3,merge=1")
    g.add_argument("--H", type=int, default=50)
    g.add_argument("--T", type=int, default=60)
    g.add_argument("--hz", type=float, default=10.0)
    g.add_argument("--noise", type=float, default=0.02)
    g.add_argument("--dist-safe", type=float, default=2.0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--loss", choices=sorted(LOSS_ALIASES))
    t.add_argument("--config", help="JSON file with training (and nested 'model') settings")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--no-clip", action="store_true", help="disable gradient-norm clipping")
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--methods", default="scene,marginal,combined")
    e.add_argument("--dist-safe", type=float, default=2.0)
    e.add_argument("--miss-threshold", type=float, default=2.0)
    e.add_argument("--report", required=True)
    e.add_argument("--csv")
    e.add_argument("--no-figure", action="store_true", help="skip the PNG summary written next to the report")

    v = sub.add_parser("viz", help="render a scene to SVG")
    v.add_argument("--scene", required=True)
    v.add_argument("--ckpt")
    v.add_argument("--world", default="best", help="'best' or a mode index")
    v.add_argument("--dist-safe", type=float, default=2.0)
    v.add_argument("--out", required=True)
    return p


def _load_data(path: str):
    from scenejoint.scene_data import SceneError, load_dataset

    try:
        scenes = load_dataset(path)
    except SceneError as exc:
        raise DataError(str(exc)) from exc
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if not scenes:
        raise DataError(f"dataset {path} is empty")
    return scenes


def _load_model(path: str):
    from scenejoint.model import SceneModel
    from scenejoint.tensor_ad import CheckpointError

    try:
        return SceneModel.load(path)
    except (CheckpointError, OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc


def _write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def cmd_gen(args) -> int:
    from scenejoint.scene_data import save_dataset
    from scenejoint.synthetic import GenConfig, GenConfigError, generate_synthetic_dataset, parse_mix

    try:
        cfg = GenConfig(
            num_scenes=args.num,
            agents_min=args.agents[0],
            agents_max=args.agents[1],
            mix=parse_mix(args.mix),
            H=args.H,
            T=args.T,
            hz=args.hz,
            noise=args.noise,
            dist_safe=args.dist_safe,
        )
    except (GenConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    scenes = generate_synthetic_dataset(cfg, args.seed)
    save_dataset(args.out, scenes, generator=cfg.to_dict(), seed=args.seed)
    log.info("wrote %d scenes to %s", len(scenes), args.out)
    return 0


def _train_config(args, scenes):
    from scenejoint.harness import TrainConfig
    from scenejoint.model import ModelConfig

    file_cfg: dict = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise DataError(f"config {args.config} must hold a JSON object")
    model_cfg = dict(file_cfg.pop("model", {}) or {})
    # horizon lengths come from the data unless the config pins them
    model_cfg.setdefault("H", scenes[0].H)
    model_cfg.setdefault("T", scenes[0].T)
    overrides = {
        "loss_mode": LOSS_ALIASES[args.loss] if args.loss else None,
        "seed": args.seed,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
    }
    merged = {**file_cfg, **{k: v for k, v in overrides.items() if v is not None}}
    if args.no_clip:
        merged["clip_norm"] = None
    if "epochs" in merged and "lr_drop_epoch" not in merged:
        # keep the default drop point inside a shortened run
        merged["lr_drop_epoch"] = min(TrainConfig.lr_drop_epoch, int(merged["epochs"] * 0.7))
    merged.update(data_dir=args.data, out_dir=args.out)
    try:
        return TrainConfig.from_dict({**merged, "model": ModelConfig.from_dict(model_cfg)})
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid training configuration: {exc}") from exc


def cmd_train(args) -> int:
    from scenejoint.harness import HarnessError, train

    scenes = _load_data(args.data)
    cfg = _train_config(args, scenes)

    def progress(row):
        log.info("epoch %d  loss %.4f  val avgMinFDE %.3f  lr %g", row["epoch"], row["loss_total"], row["val_avg_min_fde"], row["lr"])

    try:
        result = train(cfg, scenes, progress=progress)
    except HarnessError as exc:
        raise DataError(str(exc)) from exc
    log.info("best epoch %d; checkpoints in %s", result.best_epoch, args.out)
    return 0


def _methods(text: str) -> list[str]:
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        name = METHOD_ALIASES.get(part, part)
        if name not in METHOD_ALIASES.values():
            raise UsageError(f"unknown method {part!r}; choose from {', '.join(METHOD_ALIASES)}")
        if name not in out:
            out.append(name)
    if not out:
        raise UsageError("no evaluation methods given")
    return out


def cmd_eval(args) -> int:
    from scenejoint.harness import HarnessError, evaluate
    from scenejoint.metrics import MetricsConfig
    from scenejoint.report import report_csv, report_json, write_figure
    from scenejoint.tensor_ad import checkpoint_id

    methods = _methods(args.methods)
    try:
        metrics = MetricsConfig(dist_safe=args.dist_safe, miss_threshold=args.miss_threshold)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    model = _load_model(args.ckpt)
    scenes = _load_data(args.data)
    try:
        result = evaluate(model, scenes, methods, replace(metrics, K=model.config.K))
    except HarnessError as exc:
        raise DataError(str(exc)) from exc
    result = replace(result, checkpoint_id=checkpoint_id(args.ckpt))
    _write(args.report, report_json(result, dataset=str(args.data)))
    if args.csv:
        _write(args.csv, report_csv(result))
    if not args.no_figure:
        write_figure(Path(args.report).with_suffix(".png"), result)
    for m, rep in result.reports.items():
        agg = rep.aggregates
        log.info("%-17s avgMinADE %.3f  avgMinFDE %.3f  avgMR %.3f  CR %.3f", m, agg["avg_min_ade"], agg["avg_min_fde"], agg["avg_mr"], agg["avg_cr"])
    return 0


def cmd_viz(args) -> int:
    from scenejoint.metrics import avg_min_fde
    from scenejoint.model import model_forward
    from scenejoint.scene_data import SceneError, load_scene
    from scenejoint.viz import viz_svg

    if args.world != "best":
        try:
            world = int(args.world)
        except ValueError:
            raise UsageError(f"--world expects 'best' or an integer, got {args.world!r}") from None
    try:
        scene = load_scene(Path(args.scene).read_bytes())
    except SceneError as exc:
        raise DataError(f"{args.scene}: {exc}") from exc
    except OSError as exc:
        raise DataError(f"cannot read scene {args.scene}: {exc}") from exc
    pred, k = None, None
    if args.ckpt:
        model = _load_model(args.ckpt)
        if (scene.H, scene.T) != (model.config.H, model.config.T):
            raise DataError(f"{args.scene}: H={scene.H}, T={scene.T} do not match checkpoint H={model.config.H}, T={model.config.T}")
        pred = model_forward(scene, model)
        if args.world == "best":
            scored = scene.scored_indices()
            gt, valid = scene.gt_future()
            _, k = avg_min_fde(pred.trajectories[scored], gt[scored], valid[scored])
        else:
            k = world
            if not 0 <= k < model.config.K:
                raise UsageError(f"--world {k} outside [0, {model.config.K})")
    _write(args.out, viz_svg(scene, pred, k, args.dist_safe))
    log.info("wrote %s", args.out)
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "viz": cmd_viz}


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv: Sequence[str] | None = None) -> int:
    if not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        with _thread_limit():
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
