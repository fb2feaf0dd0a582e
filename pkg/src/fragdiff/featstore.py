"""Domain-tagged feature sets: persistence, normalization, similarity, synthesis.

A FeatureSet holds one float32 vector per patch, each tagged as belonging to
the labeled source domain or the unlabeled target domain. Pairwise similarity
is clamped cosine raised to a small exponent, which keeps affinities
non-negative so the downstream graph normalization stays well-posed.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FragdiffError

FGF_MAGIC = b"FGF1"

SOURCE = "source"
TARGET = "target"

DEFAULT_GAMMA = 3.0


@dataclass
class FeatureSet:
    """Immutable-by-convention container of id-tagged feature vectors."""

    ids: list[str]
    domains: list[str]
    vectors: np.ndarray  # (n, d) float32

    def __post_init__(self):
        n = len(self.ids)
        if len(self.domains) != n or self.vectors.shape[0] != n:
            raise FragdiffError("manifest-mismatch", "ids, domains and vectors disagree on count")
        if self.vectors.ndim != 2:
            raise FragdiffError("corrupt-feature", "vectors must be a 2-D array")
        if len(set(self.ids)) != n:
            raise FragdiffError("manifest-mismatch", "duplicate feature ids")
        bad = set(self.domains) - {SOURCE, TARGET}
        if bad:
            raise FragdiffError("manifest-mismatch", f"unknown domain tags {sorted(bad)}")
        if not np.all(np.isfinite(self.vectors)):
            raise FragdiffError("corrupt-feature", "feature vectors contain non-finite components")
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        self._index = {fid: i for i, fid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    @property
    def counts(self) -> tuple[int, int]:
        n_source = sum(1 for dom in self.domains if dom == SOURCE)
        return n_source, len(self) - n_source

    def indices_of(self, domain: str) -> np.ndarray:
        return np.array([i for i, dom in enumerate(self.domains) if dom == domain], dtype=np.int64)

    def index_of_id(self, feature_id: str) -> int:
        try:
            return self._index[feature_id]
        except KeyError:
            raise FragdiffError("unknown-id", f"feature id {feature_id!r} not in set") from None


def save(featset: FeatureSet, manifest_path: str | Path, blob_name: Optional[str] = None) -> None:
    """Write the JSON manifest plus the FGF1 binary blob next to it."""
    manifest_path = Path(manifest_path)
    if blob_name is None:
        blob_name = manifest_path.stem + ".fgf"
    blob_path = manifest_path.parent / blob_name

    vecs = np.ascontiguousarray(featset.vectors, dtype="<f4")
    blob = FGF_MAGIC + struct.pack("<II", len(featset), featset.d) + vecs.tobytes()
    blob_path.write_bytes(blob)

    manifest = {
        "format": "fragdiff-features",
        "d": featset.d,
        "count": len(featset),
        "records": [[i, dom] for i, dom in zip(featset.ids, featset.domains)],
        "blob": blob_name,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


def load(manifest_path: str | Path) -> FeatureSet:
    """Load and validate a feature set; the inverse of :func:`save`."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FragdiffError("manifest-mismatch", f"cannot read manifest {manifest_path}: {exc}")

    blob_path = manifest_path.parent / manifest["blob"]
    blob = blob_path.read_bytes()
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["blob_sha256"]:
        raise FragdiffError("manifest-mismatch", f"blob checksum mismatch for {blob_path}")
    if blob[:4] != FGF_MAGIC:
        raise FragdiffError("manifest-mismatch", f"{blob_path}: missing FGF1 magic")
    count, d = struct.unpack_from("<II", blob, 4)
    if count != manifest["count"] or d != manifest["d"]:
        raise FragdiffError(
            "manifest-mismatch",
            f"manifest declares count={manifest['count']} d={manifest['d']}, blob holds count={count} d={d}",
        )
    if len(blob) != 12 + 4 * count * d:
        raise FragdiffError("manifest-mismatch", f"{blob_path}: truncated blob")
    if len(manifest["records"]) != count:
        raise FragdiffError("manifest-mismatch", "record table length disagrees with count")

    vectors = np.frombuffer(blob, dtype="<f4", count=count * d, offset=12).reshape(count, d)
    ids = [rec[0] for rec in manifest["records"]]
    domains = [rec[1] for rec in manifest["records"]]
    return FeatureSet(ids=ids, domains=domains, vectors=vectors.copy())


def blob_checksum(manifest_path: str | Path) -> str:
    manifest = json.loads(Path(manifest_path).read_text())
    return manifest["blob_sha256"]


def normalize(featset: FeatureSet) -> FeatureSet:
    """Scale every vector to unit Euclidean norm, preserving ids and order."""
    norms = np.linalg.norm(featset.vectors.astype(np.float64), axis=1)
    if np.any(norms == 0):
        offenders = [featset.ids[i] for i in np.nonzero(norms == 0)[0][:5]]
        raise FragdiffError("zero-vector", f"cannot normalize zero vectors: {offenders}")
    unit = featset.vectors.astype(np.float64) / norms[:, None]
    return FeatureSet(ids=list(featset.ids), domains=list(featset.domains), vectors=unit.astype(np.float32))


def similarity(x: np.ndarray, y: np.ndarray, gamma: float = DEFAULT_GAMMA) -> float:
    """Clamped cosine similarity raised to ``gamma``; 0 for opposed vectors, 1 for identical."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise FragdiffError("dim-mismatch", f"vector dims differ: {x.shape} vs {y.shape}")
    cos = float(np.dot(x, y))
    cos = min(max(cos, 0.0), 1.0)
    return cos**gamma


def similarity_matrix(vectors: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """All-pairs clamped-cosine^gamma similarities for unit-norm row vectors."""
    v = np.asarray(vectors, dtype=np.float64)
    sims = np.clip(v @ v.T, 0.0, 1.0)
    return sims**gamma


def synth_two_domain(
    n_source: int,
    m_target: int,
    d: int,
    clusters: int,
    domain_shift: float = 0.0,
    seed: int = 0,
    noise: float = 0.05,
) -> tuple[FeatureSet, dict[str, int]]:
    """Deterministic clustered two-domain features for desk-scale experiments.

    Source clusters sit at mutually orthogonal unit centers; each target
    cluster is the same center displaced by ``domain_shift``. Returns the set
    plus ground-truth cluster labels keyed by feature id.
    """
    if clusters < 1:
        raise FragdiffError("bad-params", "clusters must be >= 1")
    if d < clusters:
        raise FragdiffError("bad-params", f"need d >= clusters to place orthogonal centers, got d={d}")
    if n_source < 1 or m_target < 1:
        raise FragdiffError("bad-params", "need at least one point per domain")

    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    centers = basis[:clusters]  # orthonormal rows

    shift_dirs, _ = np.linalg.qr(rng.standard_normal((d, d)))
    shifts = shift_dirs[:clusters] * domain_shift

    ids: list[str] = []
    domains: list[str] = []
    rows: list[np.ndarray] = []
    labels: dict[str, int] = {}

    def emit(count: int, domain: str, prefix: str, offsets: np.ndarray) -> None:
        for i in range(count):
            c = i % clusters
            vec = centers[c] + offsets[c] + noise * rng.standard_normal(d)
            fid = f"{prefix}{i // clusters:03d}:{c}:0"
            ids.append(fid)
            domains.append(domain)
            rows.append(vec)
            labels[fid] = c

    emit(n_source, SOURCE, "src", np.zeros_like(shifts))
    emit(m_target, TARGET, "tgt", shifts)

    featset = FeatureSet(ids=ids, domains=domains, vectors=np.asarray(rows, dtype=np.float32))
    return featset, labels


def synth_two_moons(
    n_source: int,
    m_target: int,
    noise: float = 0.06,
    seed: int = 0,
    d: int = 3,
    source_coverage: float = 1.0,
) -> tuple[FeatureSet, dict[str, int]]:
    """Two interleaved crescent manifolds, one label per moon.

    Points are lifted with a constant coordinate before unit normalization so
    the planar geometry survives the projection onto the sphere. With
    ``source_coverage`` below one, source points occupy only that fraction of
    each arc (anchored at opposite ends per moon) while targets cover the
    whole arc; queries near an uncovered tip then sit closer to the wrong
    moon's sources than to their own, which is exactly the regime where
    walking the target manifold beats pairwise similarity.
    """
    if d < 3:
        raise FragdiffError("bad-params", "need d >= 3 for the lifted moons")
    if not 0 < source_coverage <= 1:
        raise FragdiffError("bad-params", "source_coverage must lie in (0, 1]")
    rng = np.random.default_rng(seed)

    def moons(count: int, prefix: str, coverage: float):
        out_ids, out_rows, out_labels = [], [], {}
        for i in range(count):
            label = i % 2
            span = np.pi * coverage
            if label == 0:
                t = rng.uniform(0, span)  # anchored at the right end
                x, y = np.cos(t), np.sin(t)
            else:
                t = rng.uniform(np.pi - span, np.pi)  # anchored at the left end
                x, y = 1.0 - np.cos(t), 0.5 - np.sin(t)
            point = np.zeros(d)
            point[0] = x + noise * rng.standard_normal()
            point[1] = y + noise * rng.standard_normal()
            point[2] = 2.0  # constant lift keeps cosine monotone in planar distance
            fid = f"{prefix}{i:04d}:0:0"
            out_ids.append(fid)
            out_rows.append(point)
            out_labels[fid] = label
        return out_ids, out_rows, out_labels

    s_ids, s_rows, s_labels = moons(n_source, "msrc", source_coverage)
    t_ids, t_rows, t_labels = moons(m_target, "mtgt", 1.0)

    featset = FeatureSet(
        ids=s_ids + t_ids,
        domains=[SOURCE] * n_source + [TARGET] * m_target,
        vectors=np.asarray(s_rows + t_rows, dtype=np.float32),
    )
    return featset, {**s_labels, **t_labels}
