"""Command-line entry point: preprocess, train, eval, infer, inspect-circuit,
grad-check and param-count subcommands.

Behavior contract: exit 0 on success, nonzero with a one-line diagnostic on
failure; all randomness flows from --seed, so identical invocations produce
bit-identical artifacts.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import quanv
from .data import load_image_png, load_manifest, save_manifest, tile
from .gradcheck import run_scope
from .model import HybridUNet, ModelConfig, count_parameters
from .qsim import circuit_text
from .quanv import bottleneck_gates, measure_multibasis, encode, quanvolve
from .tensor import Tensor, no_grad
from .train import (
    TrainConfig,
    evaluate_checkpoint,
    infer,
    load_model,
    train,
)


class ConfigError(ValueError):
    pass


def _apply_fields(target, values: dict, section: str):
    valid = {f.name for f in dataclasses.fields(target)}
    for key, value in values.items():
        if key not in valid:
            raise ConfigError(f"unknown {section} field {key!r}")
        setattr(target, key, value)


def load_run_config(config_path: str | None, overrides: dict) -> tuple[ModelConfig, TrainConfig, dict]:
    model_cfg = ModelConfig()
    train_cfg = TrainConfig()
    data: dict = {}
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {config_path} is not valid JSON: {e}")
        for section in doc:
            if section not in ("model", "train", "data"):
                raise ConfigError(f"unknown config section {section!r}")
        _apply_fields(model_cfg, doc.get("model", {}), "model")
        _apply_fields(train_cfg, doc.get("train", {}), "train")
        data = dict(doc.get("data", {}))
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    for key, value in overrides.items():
        if value is None:
            continue
        if key in model_keys:
            setattr(model_cfg, key, value)
        elif key in train_keys:
            setattr(train_cfg, key, value)
        else:
            data[key] = value
    try:
        model_cfg.validate()
    except ValueError as e:
        raise ConfigError(f"model config: {e}")
    try:
        train_cfg.validate()
    except ValueError as e:
        raise ConfigError(f"train config: {e}")
    return model_cfg, train_cfg, data


def cmd_preprocess(args) -> int:
    src = Path(args.src_dir)
    image_dir, mask_dir = src / "images", src / "masks"
    images = sorted(image_dir.glob("*.png")) if image_dir.is_dir() else []
    if not images:
        raise ConfigError(f"no input rasters found under {image_dir}")
    out = Path(args.out_dir)
    splits: dict[str, list[str]] = {}
    split_dir = src / "splits"
    if split_dir.is_dir():
        for f in sorted(split_dir.glob("*.txt")):
            splits[f.stem] = f.read_text().split()
    else:
        splits["train"] = [p.stem for p in images]
    stem_to_split = {stem: split for split, stems in splits.items() for stem in stems}

    records: dict[str, list[dict]] = {s: [] for s in splits}
    for image_path in images:
        mask_path = mask_dir / image_path.name
        if not mask_path.exists():
            raise ConfigError(f"missing mask for {image_path.name} under {mask_dir}")
        split = stem_to_split.get(image_path.stem)
        if split is None:
            continue
        records[split].extend(
            tile(image_path, mask_path, out / "images", out / "masks", args.tile_size)
        )
    for split, pairs in records.items():
        if pairs:
            save_manifest(out / f"manifest_{split}.json", pairs, split, args.seed)
            print(f"{split}: {len(pairs)} tile pairs -> {out / f'manifest_{split}.json'}")
    return 0


def cmd_train(args) -> int:
    overrides = {
        "seed": args.seed,
        "steps": args.steps,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "workers": args.workers,
        "stop_miou": args.stop_miou,
        "bottleneck": args.bottleneck,
        "base_width": args.base_width,
        "depth": args.depth,
        "input_size": args.input_size,
        "train_manifest": args.train_manifest,
        "val_manifest": args.val_manifest,
    }
    model_cfg, train_cfg, data = load_run_config(args.config, overrides)
    if "train_manifest" not in data:
        raise ConfigError("no training manifest given (--train-manifest or data.train_manifest)")
    train_manifest = load_manifest(data["train_manifest"])
    val_manifest = load_manifest(data["val_manifest"]) if data.get("val_manifest") else None
    summary = train(model_cfg, train_cfg, train_manifest, args.out_dir, val_manifest)
    print(
        f"trained {summary['steps_run']} steps, final loss {summary['final_loss']:.6f}, "
        f"checkpoint {summary['checkpoint']}"
    )
    return 0


def cmd_eval(args) -> int:
    report = evaluate_checkpoint(args.checkpoint, args.manifest, args.batch_size)
    print(f"{'class':>8}  IoU")
    for k, iou in enumerate(report["per_class_iou"]):
        print(f"{k:>8}  {'n/a' if iou is None else f'{iou:.4f}'}")
    print(f"mIoU {report['mIoU']:.4f}")
    print(f"OA%  {report['OA%']:.2f}")
    if args.out:
        Path(args.out).write_text(json.dumps(report, sort_keys=True) + "\n")
        print(f"wrote {args.out}")
    return 0


def cmd_infer(args) -> int:
    out = infer(args.checkpoint, args.image, args.out)
    print(f"wrote {out}")
    return 0


def cmd_inspect_circuit(args) -> int:
    model, _, _ = load_model(args.checkpoint)
    if not isinstance(model.bottleneck.__class__.__name__, str) or model.cfg.bottleneck != "quantum":
        raise ConfigError("inspect-circuit needs a checkpoint with a quantum bottleneck")
    patch = load_image_png(args.input_patch).astype(np.float64) / 255.0
    x = Tensor(np.ascontiguousarray(patch.transpose(2, 0, 1))[None])
    params = model.bottleneck.params
    with no_grad():
        feats = model.encoder_features(x)
        squashed = quanv.pre_q_interface(feats, params)
    features = squashed.data[0]
    angles = params.circuit_angles.data
    lines = [f"layout {params.layout}"]
    names = ["thetaR1", "thetaR2", "phiR1", "phiR2", "thetaC1", "thetaC2", "phiC1", "phiC2"]
    lines.append("filter angles: " + " ".join(f"{n}={v:+.12f}" for n, v in zip(names, angles)))
    sched = quanv.filter_schedule(params.layout)
    lines.append(f"schedule ({len(sched)} applications):")
    for i, (qa, qb, f) in enumerate(sched):
        lines.append(f"app {i:02d}: {'row' if f == 0 else 'column'}-filter qubits ({qa},{qb})")
    lines.append("gates:")
    lines.append(circuit_text(bottleneck_gates(features, angles, params.layout)))
    state = encode(features)
    quanvolve(state, angles, params.layout)
    meas = measure_multibasis(state)
    lines.append("measurement:")
    for q in range(quanv.NUM_QUBITS):
        lines.append(f"expval Z q{q:02d} = {meas[q]:+.12f}")
    for q in range(quanv.NUM_QUBITS):
        lines.append(f"expval X q{q:02d} = {meas[quanv.NUM_QUBITS + q]:+.12f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_grad_check(args) -> int:
    scopes = ("qsim", "bottleneck", "model") if args.scope == "all" else (args.scope,)
    ok = True
    for scope in scopes:
        for result in run_scope(scope, args.seed):
            print(result.line())
            ok = ok and result.passed
    return 0 if ok else 1


def cmd_param_count(args) -> int:
    overrides = {
        "base_width": args.base_width,
        "depth": args.depth,
        "input_size": args.input_size,
    }
    model_cfg, _, _ = load_run_config(args.config, overrides)
    variants = {}
    for kind in ("quantum", "classical"):
        cfg = dataclasses.replace(model_cfg, bottleneck=kind)
        variants[kind] = count_parameters(cfg)
    rows = [k for k in variants["quantum"] if k != "total"]
    print(f"{'module':<14}{'quantum':>12}{'classical':>12}")
    for row in rows:
        print(f"{row:<14}{variants['quantum'][row]:>12}{variants['classical'][row]:>12}")
    print(f"{'total':<14}{variants['quantum']['total']:>12}{variants['classical']['total']:>12}")
    print(f"circuit angles: {quanv.NUM_FILTER_ANGLES} (shared across all filter applications)")
    print(
        "bottleneck comparison: quantum "
        f"{variants['quantum']['bottleneck']} (8 circuit + interface weights) "
        f"vs classical {variants['classical']['bottleneck']}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hqseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("preprocess", help="tile raster pairs and emit split manifests")
    sp.add_argument("--src-dir", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--tile-size", type=int, default=512)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--config")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--train-manifest")
    sp.add_argument("--val-manifest")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--stop-miou", type=float)
    sp.add_argument("--bottleneck", choices=("quantum", "classical"))
    sp.add_argument("--base-width", type=int)
    sp.add_argument("--depth", type=int)
    sp.add_argument("--input-size", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint over a manifest")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--batch-size", type=int, default=4)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="predict a mask raster for one image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("inspect-circuit", help="dump the bottleneck gate schedule and measurement")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input-patch", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_inspect_circuit)

    sp = sub.add_parser("grad-check", help="verify gradients against finite differences")
    sp.add_argument("--scope", choices=("qsim", "bottleneck", "model", "all"), default="all")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("param-count", help="report trainable parameter counts per module")
    sp.add_argument("--config")
    sp.add_argument("--base-width", type=int)
    sp.add_argument("--depth", type=int)
    sp.add_argument("--input-size", type=int)
    sp.set_defaults(func=cmd_param_count)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
