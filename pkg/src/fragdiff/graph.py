"""Mutual-kNN affinity graph over a joint two-domain feature set.

An edge (i, j) survives only when each endpoint appears in the other's
k-nearest-neighbor list; weights are the pairwise feature similarities. The
symmetric normalization S = D^{-1/2} A D^{-1/2} bounds the spectral radius by
one, which is what makes the diffusion fixed point well-defined.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import featstore
from .errors import FragdiffError

FGG_MAGIC = b"FGG1"


@dataclass
class AffinityGraph:
    """Sparse symmetric non-negative affinities with zero diagonal."""

    entries: sp.csr_matrix
    k: int
    gamma: float
    ids: list[str]
    domains: list[str]
    feature_checksum: str = ""

    @property
    def node_count(self) -> int:
        return self.entries.shape[0]

    @property
    def isolated_nodes(self) -> np.ndarray:
        degrees = np.asarray(self.entries.sum(axis=1)).ravel()
        return np.nonzero(degrees == 0)[0]


@dataclass
class NormalizedGraph:
    """Symmetrically normalized affinities plus the degree vector they came from."""

    entries: sp.csr_matrix
    degrees: np.ndarray
    ids: list[str]
    domains: list[str]
    k: int = 0

    @property
    def node_count(self) -> int:
        return self.entries.shape[0]

    def domain_indices(self, domain: str) -> np.ndarray:
        return np.array([i for i, dom in enumerate(self.domains) if dom == domain], dtype=np.int64)


class BlockView:
    """Query/gallery block accessors of a normalized graph.

    The query block is the source domain, the gallery block the target
    domain; the four blocks tile the full matrix exactly.
    """

    def __init__(self, graph: NormalizedGraph, query_idx: np.ndarray, gallery_idx: np.ndarray):
        n = graph.node_count
        covered = np.sort(np.concatenate([query_idx, gallery_idx]))
        if len(query_idx) == 0 or len(gallery_idx) == 0:
            raise FragdiffError("bad-partition", "both partitions must be non-empty")
        if len(covered) != n or not np.array_equal(covered, np.arange(n)):
            raise FragdiffError("bad-partition", "partition must cover every node exactly once")
        self.graph = graph
        self.query_idx = query_idx
        self.gallery_idx = gallery_idx

    def query_query(self) -> sp.csr_matrix:
        return self.graph.entries[self.query_idx][:, self.query_idx].tocsr()

    def query_gallery(self) -> sp.csr_matrix:
        return self.graph.entries[self.query_idx][:, self.gallery_idx].tocsr()

    def gallery_query(self) -> sp.csr_matrix:
        return self.graph.entries[self.gallery_idx][:, self.query_idx].tocsr()

    def gallery_gallery(self) -> sp.csr_matrix:
        return self.graph.entries[self.gallery_idx][:, self.gallery_idx].tocsr()


def knn_lists(sims: np.ndarray, k: int) -> np.ndarray:
    """Per-row top-k neighbor indices by similarity, self excluded.

    Ties break toward the lower node id so graph construction is
    deterministic regardless of input ordering.
    """
    n = sims.shape[0]
    work = sims.copy()
    np.fill_diagonal(work, -np.inf)
    # stable sort on -sim keeps ascending index order among equal similarities
    order = np.argsort(-work, axis=1, kind="stable")
    return order[:, :k]


def build_mutual_knn(
    featset: featstore.FeatureSet,
    k: int,
    gamma: float = featstore.DEFAULT_GAMMA,
    feature_checksum: str = "",
) -> AffinityGraph:
    """Build the mutual-kNN affinity graph from a unit-normalized feature set."""
    n = len(featset)
    if n < 2:
        raise FragdiffError("bad-params", "need at least two nodes")
    if k < 1:
        raise FragdiffError("bad-params", "k must be >= 1")
    if k >= n:
        raise FragdiffError("k-too-large", f"k={k} but only {n} nodes")

    sims = featstore.similarity_matrix(featset.vectors, gamma=gamma)
    neighbors = knn_lists(sims, k)

    member = np.zeros((n, n), dtype=bool)
    rows = np.repeat(np.arange(n), k)
    member[rows, neighbors.ravel()] = True
    mutual = member & member.T

    weights = np.where(mutual, sims, 0.0)
    np.fill_diagonal(weights, 0.0)
    entries = sp.csr_matrix(weights)
    entries.eliminate_zeros()
    return AffinityGraph(
        entries=entries,
        k=k,
        gamma=gamma,
        ids=list(featset.ids),
        domains=list(featset.domains),
        feature_checksum=feature_checksum,
    )


def normalize(affinity: AffinityGraph) -> NormalizedGraph:
    """S = D^{-1/2} A D^{-1/2}; rows and columns of isolated nodes stay zero."""
    a = affinity.entries
    degrees = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(degrees)
    nz = degrees > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(degrees[nz])
    scale = sp.diags(inv_sqrt)
    s = (scale @ a @ scale).tocsr()
    return NormalizedGraph(
        entries=s,
        degrees=degrees,
        ids=list(affinity.ids),
        domains=list(affinity.domains),
        k=affinity.k,
    )


def split_blocks(graph: NormalizedGraph) -> BlockView:
    """Partition the normalized graph into source-query and target-gallery blocks."""
    q_idx = graph.domain_indices(featstore.SOURCE)
    d_idx = graph.domain_indices(featstore.TARGET)
    return BlockView(graph, q_idx, d_idx)


def save(affinity: AffinityGraph, path: str | Path) -> None:
    """Persist the affinity graph as FGG1: JSON header plus CSR arrays."""
    m = affinity.entries.tocsr()
    m.sort_indices()
    header = {
        "node_count": affinity.node_count,
        "k": affinity.k,
        "gamma": affinity.gamma,
        "feature_checksum": affinity.feature_checksum,
        "records": [[i, dom] for i, dom in zip(affinity.ids, affinity.domains)],
        "nnz": int(m.nnz),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FGG_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(np.asarray(m.indptr, dtype="<u4").tobytes())
        fh.write(np.asarray(m.indices, dtype="<u4").tobytes())
        fh.write(np.asarray(m.data, dtype="<f4").tobytes())


def load(path: str | Path) -> AffinityGraph:
    data = Path(path).read_bytes()
    if data[:4] != FGG_MAGIC:
        raise FragdiffError("bad-graph-file", f"{path}: missing FGG1 magic")
    (header_len,) = struct.unpack_from("<I", data, 4)
    header = json.loads(data[8 : 8 + header_len].decode("utf-8"))
    n = header["node_count"]
    nnz = header["nnz"]
    offset = 8 + header_len
    indptr = np.frombuffer(data, dtype="<u4", count=n + 1, offset=offset).astype(np.int64)
    offset += 4 * (n + 1)
    indices = np.frombuffer(data, dtype="<u4", count=nnz, offset=offset).astype(np.int64)
    offset += 4 * nnz
    values = np.frombuffer(data, dtype="<f4", count=nnz, offset=offset).astype(np.float64)
    entries = sp.csr_matrix((values, indices, indptr), shape=(n, n))
    return AffinityGraph(
        entries=entries,
        k=header["k"],
        gamma=header["gamma"],
        ids=[rec[0] for rec in header["records"]],
        domains=[rec[1] for rec in header["records"]],
        feature_checksum=header["feature_checksum"],
    )
