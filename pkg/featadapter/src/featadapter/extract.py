"""Image to per-patch features and density predictions.

Patch ids replicate the consumer's deterministic scheme exactly: the image
file stem, then row-major grid coordinates under the same edge-replication
padding. The id sets must match or downstream joins fall apart, so the
sliding-window arithmetic here is kept in lockstep with the patchify
contract.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import formats
from .model import PatchBackbone, load_checkpoint

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class ExtractorConfig:
    checkpoint: Path
    window: int = 128
    stride: int = 64
    domain: str = "target"
    batch_size: int = 32


def _padded_extent(size: int, window: int, stride: int) -> int:
    if size <= window:
        return window
    steps = -(-(size - window) // stride)
    return window + steps * stride


def patch_grid(values: np.ndarray, window: int, stride: int) -> list[tuple[int, int, np.ndarray]]:
    """Edge-pad to the next stride multiple, then cut row-major patches."""
    h, w = values.shape
    ph, pw = _padded_extent(h, window, stride), _padded_extent(w, window, stride)
    if (ph, pw) != (h, w):
        values = np.pad(values, ((0, ph - h), (0, pw - w)), mode="edge")
    out = []
    for r in range((ph - window) // stride + 1):
        for c in range((pw - window) // stride + 1):
            top, left = r * stride, c * stride
            out.append((r, c, values[top : top + window, left : left + window]))
    return out


def load_grayscale(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        gray = img.convert("L")
        return np.asarray(gray, dtype=np.float64) / 255.0


def iter_images(images_dir: Path):
    for path in sorted(images_dir.iterdir()):
        if path.suffix.lower() in IMAGE_SUFFIXES:
            yield path.stem, load_grayscale(path)
        elif path.suffix == ".fgr":
            values, _ = formats.read_raster(path)
            yield path.stem, values


@torch.no_grad()
def run_model(model: PatchBackbone, patches: list[np.ndarray], batch_size: int) -> tuple[np.ndarray, list[np.ndarray]]:
    features = []
    densities = []
    for start in range(0, len(patches), batch_size):
        chunk = patches[start : start + batch_size]
        batch = torch.from_numpy(np.stack(chunk)[:, None, :, :]).float()
        f, d = model(batch)
        features.append(f.numpy())
        densities.extend(np.clip(d.numpy(), 0.0, 1.0))
    return np.concatenate(features, axis=0), densities


def extract(
    images_dir: str | Path,
    config: ExtractorConfig,
    out_manifest: str | Path,
    out_pred: str | Path | None = None,
) -> list[str]:
    """Write one feature record per patch plus, optionally, its predicted density map."""
    model = load_checkpoint(config.checkpoint)
    ids: list[str] = []
    all_patches: list[np.ndarray] = []
    for image_id, values in iter_images(Path(images_dir)):
        for row, col, patch in patch_grid(values, config.window, config.stride):
            ids.append(f"{image_id}:{row}:{col}")
            all_patches.append(patch)
    if not ids:
        raise ValueError(f"no images found in {images_dir}")

    features, densities = run_model(model, all_patches, config.batch_size)
    formats.write_features(out_manifest, ids, [config.domain] * len(ids), features)
    if out_pred is not None:
        formats.write_fragment_store(out_pred, dict(zip(ids, densities)), formats.KIND_DENSITY)
    logger.info("extracted %d patches from %s (d=%d)", len(ids), images_dir, features.shape[1])
    return ids


def merge_manifests(inputs: list[Path], out_manifest: Path) -> int:
    """Concatenate per-domain manifests into one joint set."""
    all_ids: list[str] = []
    all_domains: list[str] = []
    blocks = []
    for path in inputs:
        ids, domains, vectors = formats.read_features(path)
        all_ids.extend(ids)
        all_domains.extend(domains)
        blocks.append(vectors)
    dims = {b.shape[1] for b in blocks}
    if len(dims) != 1:
        raise ValueError(f"manifest dimensionalities disagree: {sorted(dims)}")
    if len(set(all_ids)) != len(all_ids):
        raise ValueError("duplicate patch ids across manifests; image stems must be unique per domain")
    formats.write_features(out_manifest, all_ids, all_domains, np.concatenate(blocks, axis=0))
    return len(all_ids)
