"""Raster preprocessing: tiling large image/mask pairs into fixed tiles,
seeded random patch sampling with normalization, dihedral augmentation, and
lossless class-mask PNG round trips.

Masks are stored as paletted PNGs whose pixel values are the class ids, so
files are viewable and the ids survive load/save exactly. Class ids:
0 background, 1 building, 2 woodland, 3 water, 4 road.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

NUM_CLASSES = 5
DEFAULT_TILE = 512

# presentation palette only; class ids are authoritative
PALETTE: list[tuple[int, int, int]] = [
    (64, 64, 64),    # 0 background
    (230, 25, 75),   # 1 building
    (60, 180, 75),   # 2 woodland
    (0, 130, 200),   # 3 water
    (255, 225, 25),  # 4 road
]


@dataclass
class SegSample:
    """Image patch [3,P,P] floats in [0,1] plus mask [P,P] class ids."""

    image: np.ndarray
    mask: np.ndarray


def load_image_png(path) -> np.ndarray:
    """8-bit RGB raster as uint8 [H,W,3]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image_png(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def load_mask_png(path, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Single-channel class-id raster as int64 [H,W]; ids must be < num_classes."""
    with Image.open(path) as im:
        if im.mode not in ("P", "L"):
            raise ValueError(f"{path}: mask must be single-channel, got mode {im.mode!r}")
        grid = np.asarray(im if im.mode == "P" else im.convert("L"), dtype=np.int64)
    if grid.size and grid.max() >= num_classes:
        r, c = np.unravel_index(int(grid.argmax()), grid.shape)
        raise ValueError(
            f"{path}: mask value {int(grid[r, c])} at (row {r}, col {c}) "
            f"outside [0,{num_classes})"
        )
    return grid


def write_mask_png(path, grid: np.ndarray, palette: list[tuple[int, int, int]] | None = None) -> None:
    """Write class ids as a paletted PNG; pixel values stay the ids exactly."""
    palette = PALETTE if palette is None else palette
    grid = np.asarray(grid)
    if grid.size and (grid.min() < 0 or grid.max() >= len(palette)):
        bad = int(grid.min()) if grid.min() < 0 else int(grid.max())
        raise ValueError(f"mask value {bad} has no palette entry (0..{len(palette) - 1})")
    im = Image.fromarray(grid.astype(np.uint8), mode="P")
    flat = [v for rgb in palette for v in rgb]
    im.putpalette(flat + [0] * (768 - len(flat)))
    im.save(path, format="PNG")


def tile(
    image_path,
    mask_path,
    out_image_dir,
    out_mask_dir,
    tile_size: int = DEFAULT_TILE,
    stem: str | None = None,
) -> list[dict]:
    """Cut one image/mask pair into a non-overlapping grid of full tiles.

    Trailing remainders smaller than the tile are dropped. Tile (r,c) covers
    source rows [r*tile_size, (r+1)*tile_size) and the analogous columns.
    Returns manifest records for the tiles written.
    """
    image = load_image_png(image_path)
    mask = load_mask_png(mask_path)
    if image.shape[:2] != mask.shape:
        raise ValueError(
            f"image extents {image.shape[:2]} != mask extents {mask.shape} "
            f"for {image_path} / {mask_path}"
        )
    h, w = mask.shape
    if h < tile_size or w < tile_size:
        raise ValueError(f"raster extents ({h},{w}) smaller than tile size {tile_size}")
    stem = stem or Path(image_path).stem
    out_image_dir = Path(out_image_dir)
    out_mask_dir = Path(out_mask_dir)
    out_image_dir.mkdir(parents=True, exist_ok=True)
    out_mask_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for r in range(h // tile_size):
        for c in range(w // tile_size):
            name = f"{stem}_r{r:03d}_c{c:03d}.png"
            rows = slice(r * tile_size, (r + 1) * tile_size)
            cols = slice(c * tile_size, (c + 1) * tile_size)
            write_image_png(out_image_dir / name, image[rows, cols])
            write_mask_png(out_mask_dir / name, mask[rows, cols])
            records.append(
                {
                    "image": str(out_image_dir / name),
                    "mask": str(out_mask_dir / name),
                    "width": tile_size,
                    "height": tile_size,
                }
            )
    return records


def save_manifest(path, pairs: list[dict], split: str, seed: int) -> None:
    doc = {"split": split, "seed": seed, "pairs": pairs}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_manifest(path, check_files: bool = True) -> dict:
    doc = json.loads(Path(path).read_text())
    for key in ("split", "seed", "pairs"):
        if key not in doc:
            raise ValueError(f"manifest {path} missing field {key!r}")
    if not doc["pairs"]:
        raise ValueError(f"manifest {path} lists no tile pairs")
    if check_files:
        for rec in doc["pairs"]:
            for key in ("image", "mask"):
                if not Path(rec[key]).exists():
                    raise ValueError(f"manifest {path}: missing file {rec[key]}")
            img = load_image_png(rec["image"])
            msk = load_mask_png(rec["mask"])
            if img.shape[:2] != msk.shape:
                raise ValueError(
                    f"manifest {path}: extents differ for {rec['image']} "
                    f"({img.shape[:2]}) vs {rec['mask']} ({msk.shape})"
                )
            if img.shape[:2] != (rec["height"], rec["width"]):
                raise ValueError(
                    f"manifest {path}: recorded extents "
                    f"({rec['height']},{rec['width']}) != actual {img.shape[:2]}"
                )
    return doc


def sample_patch(image: np.ndarray, mask: np.ndarray, patch_size: int, rng: np.random.Generator) -> SegSample:
    """Uniform random patch; pixels scaled by 1/255, mask ids unchanged.

    The top-left corner is drawn uniformly from [0, H-P] x [0, W-P]
    (row offset first, then column)."""
    h, w = mask.shape
    p = patch_size
    if p > h or p > w:
        raise ValueError(f"patch size {p} exceeds tile extents ({h},{w})")
    r0 = int(rng.integers(0, h - p + 1))
    c0 = int(rng.integers(0, w - p + 1))
    img = image[r0 : r0 + p, c0 : c0 + p].astype(np.float64) / 255.0
    return SegSample(
        image=np.ascontiguousarray(img.transpose(2, 0, 1)),
        mask=mask[r0 : r0 + p, c0 : c0 + p].astype(np.int64).copy(),
    )


def dihedral(arr: np.ndarray, k: int, axes: tuple[int, int]) -> np.ndarray:
    """k in [0,8): rotations by 90*k degrees for k < 4, the same after a
    horizontal flip for k >= 4."""
    if not 0 <= k < 8:
        raise ValueError(f"dihedral index {k} outside [0,8)")
    out = np.flip(arr, axis=axes[1]) if k >= 4 else arr
    return np.ascontiguousarray(np.rot90(out, k % 4, axes=axes))


def augment(sample: SegSample, rng: np.random.Generator) -> SegSample:
    """One of the 8 square symmetries, chosen uniformly, applied identically
    to image and mask."""
    k = int(rng.integers(0, 8))
    return SegSample(
        image=dihedral(sample.image, k, axes=(1, 2)),
        mask=dihedral(sample.mask, k, axes=(0, 1)),
    )


class PatchSampler:
    """Seeded batch sampler over a manifest.

    Draws are sharded over ``workers`` independent RNG streams (stream w
    serves batch slots w, w+workers, ...), so the merged order is
    deterministic for a fixed worker count regardless of execution order.
    Tiles are cached in memory after first use.
    """

    def __init__(
        self,
        manifest: dict,
        patch_size: int,
        seed: int,
        workers: int = 1,
        augment_patches: bool = True,
    ):
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        self.pairs = manifest["pairs"]
        self.patch_size = patch_size
        self.augment_patches = augment_patches
        self.workers = workers
        self.streams = [np.random.default_rng([seed, w]) for w in range(workers)]
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _tile(self, idx: int):
        if idx not in self._cache:
            rec = self.pairs[idx]
            self._cache[idx] = (load_image_png(rec["image"]), load_mask_png(rec["mask"]))
        return self._cache[idx]

    def draw(self, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        """One batch: images [B,3,P,P] float64, masks [B,P,P] int64."""
        images, masks = [], []
        for slot in range(batch_size):
            rng = self.streams[slot % self.workers]
            image, mask = self._tile(int(rng.integers(0, len(self.pairs))))
            s = sample_patch(image, mask, self.patch_size, rng)
            if self.augment_patches:
                s = augment(s, rng)
            images.append(s.image)
            masks.append(s.mask)
        return np.stack(images), np.stack(masks)
