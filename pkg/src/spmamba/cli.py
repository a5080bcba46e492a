"""Command-line front end.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import CLASS_NAMES, ParseError, SyntheticSceneSpec, generate_synthetic_scene, load_dataset, load_pointcloud, save_pointcloud
from .network import ConfigError, ModelConfig, build_model
from .sfc import SerializationPattern, order_points
from .sparse import voxelize
from .train import TrainConfig, TrainingDiverged, evaluate, make_trainer, predict, train_epoch

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _write_json_atomic(path: Path, doc: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _thread_limit():
    n = os.environ.get("SPM_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def _read_config(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    return doc


def _model_config(doc: dict) -> ModelConfig:
    try:
        return ModelConfig.from_dict(doc)
    except ConfigError as exc:
        raise UsageError(f"bad model config: {exc}") from None


def _metrics(state) -> dict:
    iou = state.iou()
    return {
        "miou": state.miou(),
        "accuracy": state.accuracy(),
        "iou": {CLASS_NAMES[k] if k < len(CLASS_NAMES) else str(k): (None if np.isnan(v) else float(v))
                for k, v in enumerate(iou)},
    }


def _load_training_data(doc: dict, seed: int):
    data = doc.get("data", {})
    if "dir" in data:
        scenes = load_dataset(data["dir"])
        if not scenes:
            raise UsageError(f"no .spc files in {data['dir']}")
        return scenes
    syn = data.get("synthetic", {})
    n = int(syn.get("num_scenes", 1))
    pts = int(syn.get("points_per_scene", 2000))
    base = int(syn.get("seed", seed))
    return [generate_synthetic_scene(SyntheticSceneSpec(seed=base + i, points_per_scene=pts)) for i in range(n)]


# -- commands ----------------------------------------------------------------------

def cmd_train(args) -> int:
    doc = _read_config(args.config)
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    mcfg = _model_config(doc.get("model", {}))
    try:
        tcfg = TrainConfig(**{**doc.get("train", {}), "seed": seed})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad train config: {exc}") from None
    scenes = _load_training_data(doc, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(mcfg, seed)
    trainer = make_trainer(model, tcfg, len(scenes))
    started = time.time()
    for epoch in range(tcfg.epochs):
        losses = train_epoch(trainer, scenes)
        if not args.quiet:
            print(f"epoch {epoch + 1}/{tcfg.epochs} loss {np.mean(losses):.4f} lr {trainer.opt.lr:.2e}", file=sys.stderr)
    metrics = _metrics(evaluate(model, scenes))
    save_checkpoint(out / "model.spmb", model.params.state())
    _write_json_atomic(out / "config.json", mcfg.to_dict())
    _write_json_atomic(out / "manifest.json", {
        "command": "train",
        "config": {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "data": doc.get("data", {})},
        "seed": seed,
        "version": _version(),
        "num_parameters": model.params.numel(),
        "final_loss": trainer.losses[-1],
        "metrics": metrics,
        "started_at": started,
        "finished_at": time.time(),
    })
    print(json.dumps({"miou": metrics["miou"], "accuracy": metrics["accuracy"]}))
    return EXIT_OK


def _load_model(checkpoint: str, config: str | None):
    ck = Path(checkpoint)
    if not ck.is_file():
        raise UsageError(f"checkpoint not found: {checkpoint}")
    cfg_path = Path(config) if config else ck.parent / "config.json"
    mcfg = _model_config(_read_config(str(cfg_path)))
    model = build_model(mcfg, 0)
    try:
        model.params.load_state(load_checkpoint(ck))
    except (CheckpointError, KeyError, ValueError) as exc:
        raise UsageError(f"checkpoint does not match config: {exc}") from None
    return model


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint, args.config)
    d = Path(args.dataset)
    if not d.is_dir():
        raise UsageError(f"dataset directory not found: {d}")
    scenes = load_dataset(d)
    if not scenes:
        raise UsageError(f"no .spc files in {d}")
    metrics = _metrics(evaluate(model, scenes))
    if args.json:
        print(json.dumps(metrics, sort_keys=True))
    else:
        for name, v in metrics["iou"].items():
            print(f"{name:10s} {'-' if v is None else f'{v:.4f}'}")
        print(f"{'mIoU':10s} {metrics['miou']:.4f}")
        print(f"{'accuracy':10s} {metrics['accuracy']:.4f}")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    _write_json_atomic(out / "eval_manifest.json", {
        "command": "eval",
        "checkpoint": str(args.checkpoint),
        "dataset": str(d),
        "config": model.cfg.to_dict(),
        "version": _version(),
        "metrics": metrics,
        "finished_at": time.time(),
    })
    return EXIT_OK


def cmd_segment(args) -> int:
    model = _load_model(args.checkpoint, args.config)
    pc = load_pointcloud(args.input)
    preds = predict(model, pc)
    pc.labels = preds
    save_pointcloud(args.out, pc)
    return EXIT_OK


def cmd_serialize_demo(args) -> int:
    try:
        pattern = SerializationPattern.parse(args.pattern)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    pc = load_pointcloud(args.input)
    vs = voxelize(pc, args.grid_size)
    cells = vs.cells[vs.point_to_cell]
    order = order_points(cells, pattern)
    seq = cells[order.perm]
    lines = ["sequence_index,key,x,y,z"]
    lines += [f"{i},{int(k)},{c[0]},{c[1]},{c[2]}" for i, (k, c) in enumerate(zip(order.keys, seq))]
    Path(args.out).write_text("\n".join(lines) + "\n")
    locality = float(np.abs(np.diff(seq, axis=0)).sum(axis=1).mean()) if len(seq) > 1 else 0.0
    print(f"pattern={pattern.value} points={len(seq)} mean_l1_step={locality:.6f}")
    return EXIT_OK


def cmd_generate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.num_scenes):
        pc = generate_synthetic_scene(SyntheticSceneSpec(seed=args.seed + i, points_per_scene=args.points))
        save_pointcloud(out / f"scene_{i:04d}.spc", pc)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spmamba", description="Serialized Point Mamba segmentation toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a directory of .spc clouds")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--config", help="model config JSON (default: config.json next to the checkpoint)")
    p.add_argument("--out", help="directory for eval_manifest.json")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", help="label one cloud with a trained model")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("serialize-demo", help="write the curve ordering of a cloud as CSV")
    p.add_argument("input")
    p.add_argument("--pattern", default="hilbert")
    p.add_argument("--grid-size", type=float, default=0.02)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_serialize_demo)

    p = sub.add_parser("generate", help="write synthetic labelled scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--num-scenes", type=int, default=1)
    p.add_argument("--points", type=int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ParseError, ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
