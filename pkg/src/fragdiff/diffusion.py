"""Diffusion ranking over the normalized graph.

Three interchangeable routes produce the same ranking (up to a positive
scale): the iterative random walk f <- alpha*S*f + (1-alpha)*f0, a conjugate
gradient solve of the system (I - alpha*S) f = y, and an offline table of
truncated solve columns so online scoring is a sparse dot product. All three
exist because the contraction alpha < 1 makes I - alpha*S symmetric positive
definite whenever the spectral radius of S stays within one.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import featstore
from .errors import FragdiffError
from .graph import NormalizedGraph, split_blocks

FGS_MAGIC = b"FGS1"

BATCH_QUERY_ID = "__batch__"

# ScoreTable: per-query gallery scores, each list sorted by descending score.
ScoreTable = dict[str, list[tuple[str, float]]]


@dataclass
class InitialState:
    """Non-negative starting mass over all graph nodes."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise FragdiffError("bad-state", "initial state must be a vector")
        if not np.all(np.isfinite(v)):
            raise FragdiffError("bad-state", "initial state contains non-finite entries")
        if np.any(v < 0):
            raise FragdiffError("bad-state", "initial state must be non-negative")
        if not np.any(v > 0):
            raise FragdiffError("bad-state", "initial state needs at least one positive entry")
        self.values = v

    @classmethod
    def batch(cls, graph: NormalizedGraph) -> "InitialState":
        """All-ones mass on source (query) nodes, zero on gallery nodes."""
        v = np.zeros(graph.node_count)
        v[graph.domain_indices(featstore.SOURCE)] = 1.0
        return cls(v)


@dataclass
class DiffusionResult:
    gallery_scores: np.ndarray
    iterations: int
    residual: float
    alpha: float
    converged: bool
    full_state: Optional[np.ndarray] = None
    step_residuals: Optional[np.ndarray] = None  # 2-norm step differences, per iteration


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise FragdiffError("bad-params", f"alpha must lie in (0, 1), got {alpha}")


def random_walk(
    graph: NormalizedGraph,
    state: InitialState | np.ndarray,
    alpha: float,
    tol: float = 1e-10,
    max_iter: int = 20000,
) -> DiffusionResult:
    """Iterate the restart walk to its fixed point (1-alpha)(I-alpha*S)^{-1} f0.

    Stops when the max-norm step difference drops below ``tol``; if the
    budget runs out the partial scores are still returned, flagged as not
    converged. The 2-norm step differences are recorded so callers can audit
    the geometric contraction rate.
    """
    _check_alpha(alpha)
    if tol <= 0:
        raise FragdiffError("bad-params", "tol must be positive")
    f0 = state.values if isinstance(state, InitialState) else InitialState(np.asarray(state)).values
    if f0.shape[0] != graph.node_count:
        raise FragdiffError("bad-state", f"state has {f0.shape[0]} entries for {graph.node_count} nodes")

    s = graph.entries
    restart = (1.0 - alpha) * f0
    f = f0.copy()
    history = []
    iterations = 0
    diff_inf = np.inf
    converged = False
    for iterations in range(1, max_iter + 1):
        f_next = alpha * (s @ f) + restart
        step = f_next - f
        diff_inf = float(np.max(np.abs(step)))
        history.append(float(np.linalg.norm(step)))
        f = f_next
        if diff_inf <= tol:
            converged = True
            break

    gallery_idx = graph.domain_indices(featstore.TARGET)
    return DiffusionResult(
        gallery_scores=f[gallery_idx],
        iterations=iterations,
        residual=diff_inf,
        alpha=alpha,
        converged=converged,
        full_state=f,
        step_residuals=np.asarray(history),
    )


def _jacobi_cg(matrix: sp.spmatrix, b: np.ndarray, tol: float, max_iter: int) -> tuple[np.ndarray, int, float]:
    """Conjugate gradient with Jacobi preconditioning for an SPD sparse system."""
    b = np.asarray(b, dtype=np.float64)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros_like(b), 0, 0.0

    diag = matrix.diagonal()
    inv_diag = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)

    x = np.zeros_like(b)
    r = b.copy()
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, max_iter + 1):
        ap = matrix @ p
        p_ap = float(p @ ap)
        if p_ap <= 0:
            raise FragdiffError("solver-stagnated", f"lost positive definiteness at iteration {it}")
        step = rz / p_ap
        x += step * p
        r -= step * ap
        rel = float(np.linalg.norm(r)) / b_norm
        if rel <= tol:
            return x, it, rel
        z = inv_diag * r
        rz_next = float(r @ z)
        p = z + (rz_next / rz) * p
        rz = rz_next
    raise FragdiffError(
        "solver-stagnated",
        f"conjugate gradient did not reach tol={tol} in {max_iter} iterations "
        f"(relative residual {float(np.linalg.norm(r)) / b_norm:.3e})",
    )


def system_matrix(s_block: sp.spmatrix, alpha: float) -> sp.csr_matrix:
    """I - alpha * S restricted to a block; SPD for alpha in (0, 1)."""
    n = s_block.shape[0]
    return (sp.identity(n, format="csr") - alpha * s_block.tocsr()).tocsr()


def closed_form(
    s_dd: sp.spmatrix,
    s_dq: sp.spmatrix,
    f0_q: np.ndarray,
    alpha: float,
    tol: float = 1e-8,
    max_iter: int = 1000,
) -> DiffusionResult:
    """Gallery scores from the block system (I - alpha*S_dd) f = S_dq f0_q.

    Returns the raw solve result; the positive restart factor is omitted
    because every downstream consumer only ranks or thresholds the scores.
    """
    _check_alpha(alpha)
    f0_q = np.asarray(f0_q, dtype=np.float64)
    if s_dq.shape[1] != f0_q.shape[0]:
        raise FragdiffError("bad-state", f"S_dq has {s_dq.shape[1]} query columns, state has {f0_q.shape[0]}")
    if s_dd.shape[0] != s_dq.shape[0]:
        raise FragdiffError("bad-partition", "S_dd and S_dq disagree on gallery count")

    y = s_dq @ f0_q
    matrix = system_matrix(s_dd, alpha)
    x, iterations, residual = _jacobi_cg(matrix, y, tol, max_iter)
    return DiffusionResult(
        gallery_scores=x,
        iterations=iterations,
        residual=residual,
        alpha=alpha,
        converged=True,
    )


def solve_state(
    graph: NormalizedGraph,
    state: InitialState | np.ndarray,
    alpha: float,
    tol: float = 1e-8,
    max_iter: int = 1000,
) -> np.ndarray:
    """Solve (I - alpha*S) f = f0 over the whole joint graph."""
    _check_alpha(alpha)
    f0 = state.values if isinstance(state, InitialState) else np.asarray(state, dtype=np.float64)
    matrix = system_matrix(graph.entries, alpha)
    x, _, _ = _jacobi_cg(matrix, f0, tol, max_iter)
    return x


def per_query_state(
    query_id: str,
    featset: featstore.FeatureSet,
    nn: int = 10,
    gamma: float = featstore.DEFAULT_GAMMA,
) -> InitialState:
    """Sparse restart mass: the query's similarities at its nn nearest neighbors.

    Neighbors are drawn from the whole joint set (self excluded), matching
    the graph the walk runs on.
    """
    n = len(featset)
    if not 1 <= nn < n:
        raise FragdiffError("bad-params", f"nn must satisfy 1 <= nn < {n}, got {nn}")
    q = featset.index_of_id(query_id)
    sims = featstore.similarity_matrix(featset.vectors, gamma=gamma)[q]
    sims[q] = -np.inf
    order = np.argsort(-sims, kind="stable")[:nn]
    values = np.zeros(n)
    values[order] = np.maximum(sims[order], 0.0)
    if not np.any(values > 0):
        # query orthogonal to everything: fall back to uniform mass on its neighbors
        values[order] = 1.0
    return InitialState(values)


@dataclass
class TruncatedSolveTable:
    """Per-node truncated columns of (I - alpha*S)^{-1} for offline scoring."""

    nodes: np.ndarray  # node indices covered by the table
    neighborhoods: list[np.ndarray]
    columns: list[np.ndarray]
    alpha: float
    trunc_size: int

    def score_nodes(self, state: InitialState | np.ndarray) -> np.ndarray:
        """Score every table node against a restart state: a sparse dot each."""
        y = state.values if isinstance(state, InitialState) else np.asarray(state, dtype=np.float64)
        out = np.empty(len(self.nodes))
        for j, (nb, col) in enumerate(zip(self.neighborhoods, self.columns)):
            out[j] = float(col @ y[nb])
        return out


def _truncation_neighborhood(s: sp.csr_matrix, node: int, alpha: float, trunc_size: int) -> np.ndarray:
    """Top-T nodes by accumulated multi-hop affinity mass around ``node``.

    Two hops usually decide the ranking; more hops are appended only when the
    first two reach fewer than T nodes, so that a large budget can cover the
    node's whole connected component (and never leak outside it).
    """
    n = s.shape[0]
    x = np.zeros(n)
    x[node] = 1.0
    acc = np.zeros(n)
    prev_support = -1
    for _ in range(n):
        x = alpha * (s @ x)
        acc += x
        support = int(np.count_nonzero(acc > 0))
        if support >= trunc_size or support == prev_support:
            break
        prev_support = support
    ranking = acc.copy()
    ranking[node] = np.inf
    order = np.argsort(-ranking, kind="stable")
    keep = [node]
    for idx in order:
        if idx == node:
            continue
        if ranking[idx] <= 0 or len(keep) >= trunc_size:
            break
        keep.append(int(idx))
    return np.asarray(sorted(keep), dtype=np.int64)


def precompute_truncated(
    graph: NormalizedGraph,
    alpha: float,
    trunc_size: int,
    nodes: Optional[np.ndarray] = None,
) -> TruncatedSolveTable:
    """Offline stage: solve a local system per node, restricted to its top-T neighborhood."""
    _check_alpha(alpha)
    if trunc_size < 1:
        raise FragdiffError("bad-params", "truncation size must be >= 1")
    s = graph.entries.tocsr()
    if nodes is None:
        nodes = np.arange(graph.node_count, dtype=np.int64)
    neighborhoods = []
    columns = []
    for node in nodes:
        nb = _truncation_neighborhood(s, int(node), alpha, trunc_size)
        local = s[np.ix_(nb, nb)].toarray()
        l_local = np.eye(len(nb)) - alpha * local
        e = np.zeros(len(nb))
        e[int(np.searchsorted(nb, node))] = 1.0
        columns.append(np.linalg.solve(l_local, e))
        neighborhoods.append(nb)
    return TruncatedSolveTable(
        nodes=np.asarray(nodes, dtype=np.int64),
        neighborhoods=neighborhoods,
        columns=columns,
        alpha=alpha,
        trunc_size=trunc_size,
    )


def _check_trunc_size(trunc_size: int, k: int) -> None:
    if k and trunc_size < k:
        raise FragdiffError("bad-params", f"truncation size {trunc_size} must be >= graph k={k}")


def retrieve(
    graph: NormalizedGraph,
    featset: Optional[featstore.FeatureSet] = None,
    mode: str = "per-query",
    solver: str = "cg",
    alpha: float = 0.99,
    nn: int = 10,
    gamma: float = featstore.DEFAULT_GAMMA,
    trunc_size: Optional[int] = None,
    query_domain: str = featstore.TARGET,
    tol: float = 1e-8,
    max_iter: int = 1000,
) -> ScoreTable:
    """Produce per-query gallery scores ready for rank-1 matching.

    In per-query mode every node of ``query_domain`` seeds its own restart
    state and is scored against the opposite domain. In batch mode all source
    nodes emit unit mass at once and the result is a single relevance ranking
    of the target nodes under the reserved query id.
    """
    if featset is not None and list(graph.ids) != list(featset.ids):
        raise FragdiffError("manifest-mismatch", "graph and feature set disagree on node ids")
    gallery_domain = featstore.SOURCE if query_domain == featstore.TARGET else featstore.TARGET

    if mode == "batch":
        if solver == "truncated":
            raise FragdiffError("bad-params", "truncated solver requires per-query mode")
        if solver == "cg":
            blocks = split_blocks(graph)
            result = closed_form(
                blocks.gallery_gallery(),
                blocks.gallery_query(),
                np.ones(len(blocks.query_idx)),
                alpha,
                tol=tol,
                max_iter=max_iter,
            )
            scored_idx = blocks.gallery_idx
            scores = result.gallery_scores
        elif solver == "iterate":
            result = random_walk(graph, InitialState.batch(graph), alpha, tol=tol, max_iter=max(max_iter, 20000))
            scored_idx = graph.domain_indices(featstore.TARGET)
            scores = result.gallery_scores
        else:
            raise FragdiffError("bad-params", f"unknown solver {solver!r}")
        ranked = sorted(
            zip((graph.ids[i] for i in scored_idx), scores.tolist()),
            key=lambda pair: (-pair[1], pair[0]),
        )
        return {BATCH_QUERY_ID: ranked}

    if mode != "per-query":
        raise FragdiffError("bad-params", f"unknown mode {mode!r}")
    if featset is None:
        raise FragdiffError("bad-params", "per-query mode needs the feature set for restart states")

    query_idx = graph.domain_indices(query_domain)
    scored_idx = graph.domain_indices(gallery_domain)
    if len(query_idx) == 0 or len(scored_idx) == 0:
        raise FragdiffError("bad-partition", "per-query retrieval needs both domains populated")
    scored_ids = [graph.ids[i] for i in scored_idx]

    table = None
    if solver == "truncated":
        t = trunc_size if trunc_size is not None else 5 * max(graph.k, 1)
        _check_trunc_size(t, graph.k)
        table = precompute_truncated(graph, alpha, t, nodes=scored_idx)

    out: ScoreTable = {}
    for qi in query_idx:
        qid = graph.ids[qi]
        state = per_query_state(qid, featset, nn=nn, gamma=gamma)
        if solver == "cg":
            full = solve_state(graph, state, alpha, tol=tol, max_iter=max_iter)
            scores = full[scored_idx]
        elif solver == "iterate":
            walk = random_walk(graph, state, alpha, tol=min(tol, 1e-10), max_iter=max(max_iter, 20000))
            scores = walk.full_state[scored_idx]
        elif solver == "truncated":
            scores = table.score_nodes(state)
        else:
            raise FragdiffError("bad-params", f"unknown solver {solver!r}")
        ranked = sorted(zip(scored_ids, scores.tolist()), key=lambda pair: (-pair[1], pair[0]))
        out[qid] = ranked
    return out


def write_scores(table: ScoreTable, path: str | Path) -> None:
    """Persist a score table as FGS1 triples sorted by query then descending score."""
    all_ids = sorted({qid for qid in table} | {gid for ranked in table.values() for gid, _ in ranked})
    index = {fid: i for i, fid in enumerate(all_ids)}
    triples = []
    for qid in sorted(table):
        for gid, score in table[qid]:  # already descending
            triples.append((index[qid], index[gid], score))

    header = json.dumps({"ids": all_ids}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FGS_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(triples)))
        for q, g, score in triples:
            fh.write(struct.pack("<IIf", q, g, score))


def read_scores(path: str | Path) -> ScoreTable:
    data = Path(path).read_bytes()
    if data[:4] != FGS_MAGIC:
        raise FragdiffError("bad-score-file", f"{path}: missing FGS1 magic")
    (header_len,) = struct.unpack_from("<I", data, 4)
    ids = json.loads(data[8 : 8 + header_len].decode("utf-8"))["ids"]
    offset = 8 + header_len
    (count,) = struct.unpack_from("<I", data, offset)
    offset += 4
    table: ScoreTable = {}
    for _ in range(count):
        q, g, score = struct.unpack_from("<IIf", data, offset)
        offset += 12
        table.setdefault(ids[q], []).append((ids[g], float(score)))
    return table
