"""Batch export of ViT key-token descriptors to tensor archives.

Per input crop the exporter writes:

    <stem>.loc.zst6        patch descriptors, 28 x 28 x dim float32
    <stem>.loc.valid.zst6  validity grid, 28 x 28 x 1 uint16
    <stem>.glob.zst6       pooled global descriptor, 1 x 1 x 384 float32
    <stem>.meta.json       model/checkpoint provenance and layer tags

Valid rows are L2-normalized, rows for patches that lie fully outside the
mask are zero and flagged invalid; foreground pooling uses the same
validity. Deterministic: exporting a crop twice yields identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ShapeError
from .model import EMBED, GRID, IMAGE_SIZE, PATCH, ViTSmall8
from .tensorfile import write_tensor

GLOBAL_LAYER = 9   # shallow keys describe the whole crop
LOCAL_LAYER = 11   # deep keys localize patches
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
BIN_OFFSETS_D1 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


@dataclass
class ExportJob:
    images: list            # paths to 224 x 224 RGB crops
    masks: list             # paths to 224 x 224 masks (0 = background)
    out_dir: Path
    model_tag: str = "vit-s-8"
    checkpoint: str = "unspecified"
    global_layer: int = GLOBAL_LAYER
    local_layer: int = LOCAL_LAYER
    write_global: bool = True
    write_local: bool = True
    binned: bool = False    # 17-bin spatial aggregation, dim 384 * 17 = 6528

    def __post_init__(self):
        if len(self.images) != len(self.masks):
            raise ShapeError("images and masks lists differ in length")
        self.out_dir = Path(self.out_dir)


def _load_crop(path) -> torch.Tensor:
    img = Image.open(path).convert("RGB")
    if img.size != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"crop {path} is {img.size}, expected "
                         f"({IMAGE_SIZE}, {IMAGE_SIZE})")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - IMAGENET_MEAN) / IMAGENET_STD
    return torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1)[None]


def _load_mask_validity(path) -> np.ndarray:
    mask = np.asarray(Image.open(path)) > 0
    if mask.shape[:2] != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"mask {path} is {mask.shape[:2]}, expected "
                         f"({IMAGE_SIZE}, {IMAGE_SIZE})")
    if mask.ndim == 3:
        mask = mask.any(axis=2)
    # a patch is valid unless it lies fully outside the mask
    patches = mask.reshape(GRID, PATCH, GRID, PATCH)
    return patches.any(axis=(1, 3))


def _normalize_rows(grid: np.ndarray, valid: np.ndarray) -> np.ndarray:
    out = grid.astype(np.float32).copy()
    norms = np.linalg.norm(out, axis=-1)
    ok = valid & (norms > 1e-12)
    out[ok] /= norms[ok][..., None]
    out[~ok] = 0.0
    return out


def _log_bin(keys: np.ndarray) -> np.ndarray:
    """17-bin spatial aggregation of a (28, 28, d) key grid -> (28, 28, 17 d).

    Bin 0 is the patch itself; bins 1-8 its 8 neighbors at distance 1;
    bins 9-16 the neighbors at distance 2 of a 3 x 3 mean-smoothed grid.
    Out-of-grid neighbors contribute zeros.
    """
    g, _, d = keys.shape

    def neighbor(src, dy, dx):
        # value of the cell at offset (dy, dx), zeros past the border
        out = np.zeros_like(src)
        ys = slice(max(0, -dy), min(g, g - dy))
        xs = slice(max(0, -dx), min(g, g - dx))
        out[ys, xs] = src[slice(max(0, dy), min(g, g + dy)),
                          slice(max(0, dx), min(g, g + dx))]
        return out

    smooth = np.zeros_like(keys)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            smooth += neighbor(keys, dy, dx)
    smooth /= 9.0

    bins = [keys]
    bins += [neighbor(keys, dy, dx) for dy, dx in BIN_OFFSETS_D1]
    bins += [neighbor(smooth, 2 * dy, 2 * dx) for dy, dx in BIN_OFFSETS_D1]
    return np.concatenate(bins, axis=-1)


def export_descriptors(job: ExportJob, model: ViTSmall8) -> list[Path]:
    """Run the model over every crop and write the archive files."""
    job.out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    layers = sorted({job.global_layer, job.local_layer})
    torch.set_grad_enabled(False)
    for image_path, mask_path in zip(job.images, job.masks):
        stem = Path(image_path).stem
        crop = _load_crop(image_path)
        valid = _load_mask_validity(mask_path)
        keys = model.patch_keys(crop, layers)

        meta = {
            "model": job.model_tag,
            "checkpoint": job.checkpoint,
            "patch_size": PATCH,
            "stride": PATCH,
        }

        if job.write_local:
            local = keys[job.local_layer][0].numpy()
            tag = f"key-L{job.local_layer}"
            if job.binned:
                local = _log_bin(local)
                tag += "-binned17"
            local = _normalize_rows(local, valid)
            loc_path = job.out_dir / f"{stem}.loc.zst6"
            write_tensor(loc_path, local, metadata={**meta, "layer_tag": tag})
            write_tensor(job.out_dir / f"{stem}.loc.valid.zst6",
                         valid.astype(np.uint16)[:, :, None])
            written.append(loc_path)

        if job.write_global:
            glob_keys = keys[job.global_layer][0].numpy().astype(np.float64)
            if not valid.any():
                pooled = np.zeros(EMBED, dtype=np.float32)
            else:
                pooled = glob_keys[valid].mean(axis=0)
                pooled = (pooled / np.linalg.norm(pooled)).astype(np.float32)
            glob_path = job.out_dir / f"{stem}.glob.zst6"
            write_tensor(glob_path, pooled.reshape(1, 1, -1),
                         metadata={**meta, "layer_tag": f"key-L{job.global_layer}"})
            written.append(glob_path)

        (job.out_dir / f"{stem}.meta.json").write_text(
            json.dumps({**meta,
                        "global_layer": job.global_layer,
                        "local_layer": job.local_layer,
                        "binned": job.binned}, sort_keys=True, indent=1) + "\n")
    return written
