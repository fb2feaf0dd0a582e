"""Reference trainer honoring the pipeline contract.

Reads a pseudo-label dataset, fine-tunes only the head layers on the blended
pixel and structural objective, re-embeds the trained patches, and writes the
refreshed joint feature manifest. An empty dataset degrades to a pass-through
copy so the loop can always advance.
"""
from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import formats
from .model import PatchBackbone, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

STRUCT_GAMMA1 = 0.0001
STRUCT_GAMMA2 = 0.0009


@dataclass
class FinetuneConfig:
    checkpoint: Path
    lr: float = 1e-6
    weight_decay: float = 5e-4
    batch_size: int = 16
    epochs: int = 1
    theta: float = 1.0
    eta: float = 1.0
    checkpoint_out: Path | None = None


def structural_similarity(estimated: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
    """Differentiable whole-window similarity with the standard stabilizers."""
    mu_e = estimated.mean(dim=(1, 2))
    mu_g = reference.mean(dim=(1, 2))
    var_e = estimated.var(dim=(1, 2), unbiased=False)
    var_g = reference.var(dim=(1, 2), unbiased=False)
    cov = ((estimated - mu_e[:, None, None]) * (reference - mu_g[:, None, None])).mean(dim=(1, 2))
    numerator = (2 * mu_e * mu_g + STRUCT_GAMMA1) * (2 * cov + STRUCT_GAMMA2)
    denominator = (mu_e**2 + mu_g**2 + STRUCT_GAMMA1) * (var_e + var_g + STRUCT_GAMMA2)
    return numerator / denominator


def batch_loss(pred: torch.Tensor, label: torch.Tensor, theta: float, eta: float) -> torch.Tensor:
    mse = ((pred - label) ** 2).mean(dim=(1, 2))
    structural = 1.0 - structural_similarity(pred, label)
    return (theta * mse + eta * structural).mean()


def copy_features(features_in: Path, features_out: Path) -> None:
    manifest = features_in.read_text()
    features_out.write_text(manifest)
    import json

    blob_name = json.loads(manifest)["blob"]
    out_blob = features_out.parent / (features_out.stem + ".fgf")
    shutil.copyfile(features_in.parent / blob_name, out_blob)
    # retarget the copied manifest at its own blob
    payload = json.loads(manifest)
    payload["blob"] = out_blob.name
    features_out.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def load_training_pairs(dataset_dir: Path) -> tuple[list[str], list[np.ndarray], list[np.ndarray]]:
    ids, patches, labels = [], [], []
    for row in formats.read_dataset_manifest(dataset_dir):
        if "patch" not in row:
            logger.warning("pair %s lacks a patch raster; skipping", row["target_id"])
            continue
        patch, _ = formats.read_raster(dataset_dir / row["patch"])
        label, _ = formats.read_raster(dataset_dir / row["label"])
        ids.append(row["target_id"])
        patches.append(patch)
        labels.append(label / 255.0)  # back to the unit range the heads predict in
    return ids, patches, labels


def finetune(dataset_dir: str | Path, features_in: str | Path, features_out: str | Path, config: FinetuneConfig) -> int:
    """Returns a process exit code: 0 on success, 2 on divergence."""
    dataset_dir = Path(dataset_dir)
    features_in = Path(features_in)
    features_out = Path(features_out)

    ids, patches, labels = load_training_pairs(dataset_dir)
    if not ids:
        logger.info("empty dataset: passing features through unchanged")
        copy_features(features_in, features_out)
        return 0

    model = load_checkpoint(config.checkpoint)
    for parameter in model.parameters():
        parameter.requires_grad_(False)
    for parameter in model.last_layer_parameters():
        parameter.requires_grad_(True)
    model.train()

    optimizer = torch.optim.Adam(model.last_layer_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    patch_tensor = torch.from_numpy(np.stack(patches)[:, None, :, :]).float()
    label_tensor = torch.from_numpy(np.stack(labels)).float()

    last_loss = float("nan")
    for epoch in range(config.epochs):
        for start in range(0, len(ids), config.batch_size):
            xb = patch_tensor[start : start + config.batch_size]
            yb = label_tensor[start : start + config.batch_size]
            optimizer.zero_grad()
            _, pred = model(xb)
            loss = batch_loss(pred, yb, config.theta, config.eta)
            if not torch.isfinite(loss):
                logger.error("loss diverged to %s at epoch %d", loss.item(), epoch)
                return 2
            loss.backward()
            optimizer.step()
            last_loss = float(loss.item())
    logger.info("fine-tuned %d pairs for %d epochs; final batch loss %.6f", len(ids), config.epochs, last_loss)

    model.eval()
    with torch.no_grad():
        refreshed, _ = model(patch_tensor)
    refreshed = refreshed.numpy()

    all_ids, all_domains, all_vectors = formats.read_features(features_in)
    if refreshed.shape[1] != all_vectors.shape[1]:
        logger.error("checkpoint feature dim %d does not match manifest d=%d", refreshed.shape[1], all_vectors.shape[1])
        return 2
    position = {fid: i for i, fid in enumerate(all_ids)}
    for fid, vector in zip(ids, refreshed):
        if fid in position:
            all_vectors[position[fid]] = vector
        else:
            logger.warning("trained patch %s not present in features-in; ignored", fid)
    formats.write_features(features_out, all_ids, all_domains, all_vectors)

    if config.checkpoint_out is not None:
        save_checkpoint(model, config.checkpoint_out)
    return 0
