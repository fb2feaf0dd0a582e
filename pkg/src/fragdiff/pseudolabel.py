"""Fuse matched ground-truth and prediction fragments into pseudo-labels.

The fusion is a pixelwise affine blend; the normalization rescales the blend
so its peak sits exactly at 255, except that fragments whose peak falls below
0.1 are zeroed outright (too faint to trust as supervision).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .align import FilteredMatches
from .errors import FragdiffError
from .patchkit import Raster, RasterKind, read_raster, write_raster

logger = logging.getLogger(__name__)

FAINT_PEAK = 0.1
LABEL_PEAK = 255.0


@dataclass
class PseudoLabel:
    label: Raster
    target_id: str
    source_id: str
    fusion_weight: float
    max_fused: float


def fuse(gt: Raster, pred: Raster, weight: float) -> Raster:
    """Pixelwise blend (1-w)*gt + w*pred; w=0 returns gt, w=1 returns pred."""
    if gt.values.shape != pred.values.shape:
        raise FragdiffError(
            "fragment-dim-mismatch",
            f"ground truth {gt.values.shape} vs prediction {pred.values.shape}",
        )
    if not 0.0 <= weight <= 1.0:
        raise FragdiffError("bad-params", f"fusion weight must lie in [0, 1], got {weight}")
    fused = (1.0 - weight) * gt.values + weight * pred.values
    return Raster(fused, RasterKind.DENSITY_MAP)


def normalize_label(fused: Raster, target_id: str = "", source_id: str = "", weight: float = 0.0) -> PseudoLabel:
    """Rescale so the peak is exactly 255, or zero the map when the peak is faint.

    Dividing by the peak before multiplying keeps the maximum exact in
    floating point: x/x is exactly one.
    """
    peak = float(np.max(fused.values))
    if peak < FAINT_PEAK:
        label_values = np.zeros_like(fused.values)
    else:
        label_values = (fused.values / peak) * LABEL_PEAK
    return PseudoLabel(
        label=Raster(label_values, RasterKind.LABEL_MAP),
        target_id=target_id,
        source_id=source_id,
        fusion_weight=weight,
        max_fused=peak,
    )


class FragmentStore:
    """Directory of FGR1 fragments addressed by patch id through index.json."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        index_path = self.directory / "index.json"
        if not index_path.exists():
            raise FragdiffError("missing-fragment", f"no index.json in {self.directory}")
        self.index: dict[str, str] = json.loads(index_path.read_text())

    def __contains__(self, fragment_id: str) -> bool:
        return fragment_id in self.index

    def ids(self) -> list[str]:
        return sorted(self.index)

    def get(self, fragment_id: str) -> Raster:
        if fragment_id not in self.index:
            raise FragdiffError("missing-fragment", f"{fragment_id!r} not in store {self.directory}")
        return read_raster(self.directory / self.index[fragment_id])

    @classmethod
    def create(cls, directory: str | Path, fragments: dict[str, Raster]) -> "FragmentStore":
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {}
        for i, fragment_id in enumerate(sorted(fragments)):
            name = f"{i:06d}.fgr"
            write_raster(directory / name, fragments[fragment_id])
            index[fragment_id] = name
        (directory / "index.json").write_text(json.dumps(index, sort_keys=True, indent=1) + "\n")
        return cls(directory)


def build_dataset(
    matches: FilteredMatches,
    gt_store: FragmentStore,
    pred_store: FragmentStore,
    weight: float,
    out_dir: str | Path,
    patch_store: Optional[FragmentStore] = None,
) -> Path:
    """Emit the training dataset for one adaptation round.

    One pseudo-label per match, plus the matched target patch raster when a
    patch store is supplied; manifest.json records provenance in match order.
    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    labels_dir = out_dir / "labels"
    labels_dir.mkdir(parents=True, exist_ok=True)
    patches_dir = out_dir / "patches"
    if patch_store is not None:
        patches_dir.mkdir(parents=True, exist_ok=True)

    missing = [
        p.target_id if p.target_id not in pred_store else p.source_id
        for p in matches.pairs
        if p.target_id not in pred_store or p.source_id not in gt_store
    ]
    if missing:
        raise FragdiffError("missing-fragment", f"unresolved fragment ids: {missing[:10]}")

    rows = []
    for i, pair in enumerate(matches.pairs):
        gt = gt_store.get(pair.source_id)
        pred = pred_store.get(pair.target_id)
        fused = fuse(gt, pred, weight)
        pseudo = normalize_label(fused, pair.target_id, pair.source_id, weight)
        label_name = f"labels/{i:06d}.fgr"
        write_raster(out_dir / label_name, pseudo.label)
        row = {
            "target_id": pair.target_id,
            "source_id": pair.source_id,
            "score": pair.score,
            "fusion_weight": weight,
            "max_fused": pseudo.max_fused,
            "label": label_name,
        }
        if patch_store is not None:
            patch_name = f"patches/{i:06d}.fgr"
            write_raster(out_dir / patch_name, patch_store.get(pair.target_id))
            row["patch"] = patch_name
        rows.append(row)

    manifest = {"format": "fragdiff-dataset", "count": len(rows), "pairs": rows}
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest_path
