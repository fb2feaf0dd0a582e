"""Desk-scale synthetic world: features plus matching fragment stores.

Builds everything an adaptation run consumes: clustered two-domain features,
per-source ground-truth fragments, per-target predictions (deliberately
imperfect), the target patch rasters, and the held-out truth used only for
evaluation. Cluster identity drives the fragment pattern, so retrieval
quality translates directly into pseudo-label quality.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import featstore
from .patchkit import Raster, RasterKind
from .pseudolabel import FragmentStore


def _cluster_pattern(cluster: int, size: int, total_clusters: int) -> np.ndarray:
    """A distinct blob position and mass per cluster."""
    grid = np.zeros((size, size))
    row = (cluster + 1) * size // (total_clusters + 1)
    col = size - row
    rr, cc = np.mgrid[0:size, 0:size]
    blob = np.exp(-((rr - row) ** 2 + (cc - col) ** 2) / (2.0 * (size / 8.0) ** 2))
    mass = 0.5 + 0.5 * cluster
    return grid + blob * mass / blob.max()


def build_world(
    out_dir: str | Path,
    n_source: int = 60,
    m_target: int = 60,
    d: int = 16,
    clusters: int = 3,
    domain_shift: float = 0.15,
    noise: float = 0.05,
    fragment_size: int = 16,
    prediction_error: float = 0.5,
    seed: int = 0,
) -> dict:
    """Create stores and a feature manifest under ``out_dir``; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed + 1)

    featset, labels = featstore.synth_two_domain(
        n_source, m_target, d, clusters, domain_shift=domain_shift, noise=noise, seed=seed
    )
    manifest_path = out_dir / "features.json"
    featstore.save(featset, manifest_path)
    (out_dir / "labels.json").write_text(json.dumps(labels, sort_keys=True, indent=1) + "\n")

    gt, pred, truth, patches = {}, {}, {}, {}
    for fid, domain in zip(featset.ids, featset.domains):
        cluster = labels[fid]
        pattern = _cluster_pattern(cluster, fragment_size, clusters)
        if domain == featstore.SOURCE:
            gt[fid] = Raster(pattern, RasterKind.DENSITY_MAP)
        else:
            truth[fid] = Raster(pattern, RasterKind.DENSITY_MAP)
            wrong = _cluster_pattern((cluster + 1) % clusters, fragment_size, clusters)
            blend = (1 - prediction_error) * pattern + prediction_error * wrong
            pred[fid] = Raster(blend, RasterKind.DENSITY_MAP)
            image = pattern + 0.02 * rng.standard_normal(pattern.shape)
            patches[fid] = Raster(np.clip(image, 0, None), RasterKind.IMAGE_GRAY)

    paths = {
        "features": manifest_path,
        "labels": out_dir / "labels.json",
        "gt_store": out_dir / "gt",
        "pred_store": out_dir / "pred",
        "eval_gt_store": out_dir / "truth",
        "patch_store": out_dir / "patches",
    }
    FragmentStore.create(paths["gt_store"], gt)
    FragmentStore.create(paths["pred_store"], pred)
    FragmentStore.create(paths["eval_gt_store"], truth)
    FragmentStore.create(paths["patch_store"], patches)
    return paths
