"""Training loop, evaluation and inference.

Runs are reproducible byte for byte: all randomness flows from the configured
seed, logs are JSON lines without timestamps, and checkpoints use the
deterministic container in :mod:`hqseg.checkpoint`.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import PALETTE, PatchSampler, load_image_png, load_manifest, write_mask_png
from .layers import softmax_cross_entropy
from .metrics import ConfusionMatrix, metrics_report
from .model import HybridUNet, ModelConfig, predict
from .optim import Adam
from .tensor import Tensor, no_grad


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    workers: int = 1
    augment: bool = True
    val_every: int = 50
    checkpoint_every: int = 0  # 0: final checkpoint only
    stop_miou: float | None = None  # early stop once train mIoU reaches this
    stop_check_every: int = 20

    def validate(self) -> None:
        errs = []
        for name in ("steps", "batch_size", "workers", "stop_check_every"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be positive, got {getattr(self, name)}")
        if self.val_every < 0:
            errs.append(f"val_every must be >= 0, got {self.val_every}")
        if self.lr <= 0:
            errs.append(f"lr must be positive, got {self.lr}")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            errs.append(f"betas must be in [0,1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0:
            errs.append(f"eps must be positive, got {self.eps}")
        if self.checkpoint_every < 0:
            errs.append(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.batch_size < 2:
            errs.append("batch_size must be >= 2 (batch norm trains on batch statistics)")
        if errs:
            raise ValueError("; ".join(errs))


def model_arrays(model: HybridUNet) -> dict[str, np.ndarray]:
    arrays = {f"param.{n}": t.data for n, t in model.named_parameters()}
    arrays.update({f"buffer.{n}": b for n, b in model.named_buffers()})
    return arrays


def save_model(path, model: HybridUNet, optimizer: Adam | None = None, extra: dict | None = None) -> None:
    config = {"model": dataclasses.asdict(model.cfg)}
    if extra:
        config.update(extra)
    arrays = model_arrays(model)
    if optimizer is not None:
        arrays.update({f"opt.{k}": v for k, v in optimizer.state_arrays().items()})
    save_checkpoint(path, config, arrays)


def load_model(path) -> tuple[HybridUNet, dict, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint; returns (model, config, raw arrays)."""
    config, arrays = load_checkpoint(path)
    model = HybridUNet(ModelConfig(**config["model"]))
    for name, t in model.named_parameters():
        key = f"param.{name}"
        if key not in arrays:
            raise ValueError(f"checkpoint {path} missing parameter {name}")
        if arrays[key].shape != t.data.shape:
            raise ValueError(
                f"checkpoint parameter {name} has shape {arrays[key].shape}, "
                f"expected {t.data.shape}"
            )
        t.data = arrays[key].copy()
    for name, buf in model.named_buffers():
        buf[...] = arrays[f"buffer.{name}"]
    return model, config, arrays


class JsonlLogger:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")

    def log(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _batch_tensor(images: np.ndarray) -> Tensor:
    return Tensor(images)


def evaluate_model(model: HybridUNet, manifest: dict, batch_size: int = 4) -> ConfusionMatrix:
    """Stream every manifest pair through the model, accumulating one
    confusion matrix. Tiles are covered by a non-overlapping grid of
    input_size patches; extents must divide evenly."""
    size = model.cfg.input_size
    cm = ConfusionMatrix(model.cfg.num_classes)
    patches: list[tuple[np.ndarray, np.ndarray]] = []

    def flush():
        if not patches:
            return
        images = np.stack([p[0] for p in patches])
        masks = np.stack([p[1] for p in patches])
        with no_grad():
            logits = model.forward(_batch_tensor(images), training=False)
        cm.update(predict(logits), masks)
        patches.clear()

    from .data import load_mask_png  # local import to keep module load light

    for rec in manifest["pairs"]:
        image = load_image_png(rec["image"]).astype(np.float64) / 255.0
        mask = load_mask_png(rec["mask"])
        h, w = mask.shape
        if h % size or w % size:
            raise ValueError(
                f"tile extents ({h},{w}) not divisible by evaluation patch size {size} "
                f"for {rec['image']}"
            )
        for r0 in range(0, h, size):
            for c0 in range(0, w, size):
                img = np.ascontiguousarray(
                    image[r0 : r0 + size, c0 : c0 + size].transpose(2, 0, 1)
                )
                patches.append((img, mask[r0 : r0 + size, c0 : c0 + size]))
                if len(patches) == batch_size:
                    flush()
    flush()
    return cm


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_manifest: dict,
    out_dir,
    val_manifest: dict | None = None,
) -> dict:
    """Run the loop; writes train_log.jsonl and checkpoint.hqc under out_dir.

    Returns a summary dict (final step, last loss, last known train mIoU).
    """
    model_cfg.validate()
    train_cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = JsonlLogger(out_dir / "train_log.jsonl")
    log.log({"event": "config", "model": dataclasses.asdict(model_cfg),
             "train": dataclasses.asdict(train_cfg)})

    model = HybridUNet(model_cfg, seed=train_cfg.seed)
    optimizer = Adam(
        model.named_parameters(),
        lr=train_cfg.lr,
        betas=(train_cfg.beta1, train_cfg.beta2),
        eps=train_cfg.eps,
    )
    sampler = PatchSampler(
        train_manifest,
        patch_size=model_cfg.input_size,
        seed=train_cfg.seed,
        workers=train_cfg.workers,
        augment_patches=train_cfg.augment,
    )

    ckpt_path = out_dir / "checkpoint.hqc"
    summary = {"steps_run": 0, "final_loss": None, "train_miou": None}
    for step in range(1, train_cfg.steps + 1):
        images, masks = sampler.draw(train_cfg.batch_size)
        logits = model.forward(_batch_tensor(images), training=True)
        loss = softmax_cross_entropy(logits, masks)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        summary["steps_run"] = step
        summary["final_loss"] = loss.item()
        log.log({"event": "step", "step": step, "loss": loss.item()})

        if val_manifest is not None and train_cfg.val_every and step % train_cfg.val_every == 0:
            rep = metrics_report(evaluate_model(model, val_manifest, train_cfg.batch_size))
            log.log({"event": "val", "step": step, "mIoU": rep["mIoU"], "OA%": rep["OA%"]})
        if train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            save_model(ckpt_path, model, optimizer, {"step": step})
        if train_cfg.stop_miou is not None and step % train_cfg.stop_check_every == 0:
            rep = metrics_report(evaluate_model(model, train_manifest, train_cfg.batch_size))
            summary["train_miou"] = rep["mIoU"]
            log.log({"event": "train_miou", "step": step, "mIoU": rep["mIoU"], "OA%": rep["OA%"]})
            if rep["mIoU"] >= train_cfg.stop_miou:
                log.log({"event": "early_stop", "step": step, "mIoU": rep["mIoU"]})
                break

    save_model(ckpt_path, model, optimizer, {"step": summary["steps_run"]})
    log.log({"event": "done", "steps": summary["steps_run"]})
    log.close()
    summary["checkpoint"] = str(ckpt_path)
    summary["log"] = str(out_dir / "train_log.jsonl")
    return summary


def evaluate_checkpoint(checkpoint_path, manifest_path, batch_size: int = 4) -> dict:
    model, _, _ = load_model(checkpoint_path)
    manifest = load_manifest(manifest_path)
    return metrics_report(evaluate_model(model, manifest, batch_size))


def infer(checkpoint_path, image_path, out_path) -> Path:
    """Predict a full image by non-overlapping patches and write the paletted
    mask raster next to it (or to out_path)."""
    model, _, _ = load_model(checkpoint_path)
    size = model.cfg.input_size
    image = load_image_png(image_path).astype(np.float64) / 255.0
    h, w = image.shape[:2]
    if h % size or w % size:
        raise ValueError(
            f"image extents ({h},{w}) not divisible by model input size {size}"
        )
    mask = np.zeros((h, w), dtype=np.int64)
    for r0 in range(0, h, size):
        for c0 in range(0, w, size):
            img = np.ascontiguousarray(image[r0 : r0 + size, c0 : c0 + size].transpose(2, 0, 1))
            with no_grad():
                logits = model.forward(Tensor(img[None]), training=False)
            mask[r0 : r0 + size, c0 : c0 + size] = predict(logits)[0]
    out_path = Path(out_path) if out_path else Path(image_path).with_name(Path(image_path).stem + "_pred.png")
    write_mask_png(out_path, mask, PALETTE)
    return out_path
