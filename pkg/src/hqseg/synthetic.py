"""Synthetic image/mask fixtures: color-coded geometric shapes over a noisy
background. Used by the overfit smoke experiment and the CLI tests; not part
of the training pipeline proper."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import NUM_CLASSES, save_manifest, write_image_png, write_mask_png

# mean RGB per class, distinct enough to make overfitting quick
CLASS_COLORS = np.array(
    [
        [90, 90, 90],     # background
        [220, 40, 60],    # building
        [50, 170, 70],    # woodland
        [30, 110, 210],   # water
        [240, 220, 60],   # road
    ],
    dtype=np.float64,
)


def synthesize_pair(size: int, rng: np.random.Generator, num_classes: int = NUM_CLASSES):
    """One [size,size] mask of random rectangles/disks plus its rendering."""
    mask = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    for cls in rng.permutation(np.arange(1, num_classes))[: rng.integers(2, num_classes)]:
        if rng.integers(0, 2):
            r0, c0 = rng.integers(0, size - size // 4, 2)
            rh, cw = rng.integers(size // 8, size // 2, 2)
            mask[r0 : r0 + rh, c0 : c0 + cw] = cls
        else:
            cy, cx = rng.integers(size // 8, size - size // 8, 2)
            rad = rng.integers(size // 10, size // 3)
            mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad**2] = cls
    colors = CLASS_COLORS[mask]
    noise = rng.normal(0.0, 8.0, colors.shape)
    image = np.clip(colors + noise, 0, 255).astype(np.uint8)
    return image, mask


def make_synthetic_dataset(
    out_dir,
    count: int = 8,
    size: int = 64,
    seed: int = 0,
    split: str = "train",
    num_classes: int = NUM_CLASSES,
) -> Path:
    """Write ``count`` image/mask pairs plus a manifest; returns its path."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    mask_dir = out_dir / "masks"
    image_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        image, mask = synthesize_pair(size, rng, num_classes)
        name = f"synthetic_{i:03d}.png"
        write_image_png(image_dir / name, image)
        write_mask_png(mask_dir / name, mask)
        pairs.append(
            {
                "image": str(image_dir / name),
                "mask": str(mask_dir / name),
                "width": size,
                "height": size,
            }
        )
    manifest_path = out_dir / f"manifest_{split}.json"
    save_manifest(manifest_path, pairs, split, seed)
    return manifest_path
