"""Wire-format readers and writers shared with the fragment-diffusion toolkit.

These mirror the interchange schemas exactly (FGR1 rasters, FGF1 feature
blobs with JSON manifests, index.json fragment stores, dataset manifests) so
everything this adapter emits loads in the consumer without translation.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

FGR_MAGIC = b"FGR1"
FGF_MAGIC = b"FGF1"

KIND_IMAGE = 0
KIND_DENSITY = 1
KIND_LABEL = 2


def write_raster(path: str | Path, values: np.ndarray, kind: int) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    height, width = values.shape
    with open(path, "wb") as fh:
        fh.write(FGR_MAGIC)
        fh.write(struct.pack("<IIB", height, width, kind))
        fh.write(values.tobytes())


def read_raster(path: str | Path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    if data[:4] != FGR_MAGIC:
        raise ValueError(f"{path}: missing FGR1 magic")
    height, width, kind = struct.unpack_from("<IIB", data, 4)
    values = np.frombuffer(data, dtype="<f4", count=height * width, offset=13)
    return values.reshape(height, width).astype(np.float64), kind


def write_fragment_store(directory: str | Path, fragments: dict[str, np.ndarray], kind: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for i, fid in enumerate(sorted(fragments)):
        name = f"{i:06d}.fgr"
        write_raster(directory / name, fragments[fid], kind)
        index[fid] = name
    (directory / "index.json").write_text(json.dumps(index, sort_keys=True, indent=1) + "\n")


def read_fragment_store(directory: str | Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    return {fid: read_raster(directory / name)[0] for fid, name in index.items()}


def write_features(manifest_path: str | Path, ids: list[str], domains: list[str], vectors: np.ndarray) -> None:
    manifest_path = Path(manifest_path)
    blob_name = manifest_path.stem + ".fgf"
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    count, d = vectors.shape
    blob = FGF_MAGIC + struct.pack("<II", count, d) + vectors.tobytes()
    (manifest_path.parent / blob_name).write_bytes(blob)
    manifest = {
        "format": "fragdiff-features",
        "d": d,
        "count": count,
        "records": [[i, dom] for i, dom in zip(ids, domains)],
        "blob": blob_name,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def read_features(manifest_path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise ValueError(f"{manifest_path}: blob checksum mismatch")
    count, d = struct.unpack_from("<II", blob, 4)
    vectors = np.frombuffer(blob, dtype="<f4", count=count * d, offset=12).reshape(count, d).copy()
    ids = [rec[0] for rec in manifest["records"]]
    domains = [rec[1] for rec in manifest["records"]]
    return ids, domains, vectors


def read_dataset_manifest(dataset_dir: str | Path) -> list[dict]:
    manifest = json.loads((Path(dataset_dir) / "manifest.json").read_text())
    return manifest["pairs"]
