import numpy as np
import pytest

from fragdiff import featstore, graph
from fragdiff.errors import FragdiffError


def make_set(vectors, n_source=None):
    vectors = np.asarray(vectors, dtype=np.float32)
    n = len(vectors)
    n_source = n // 2 if n_source is None else n_source
    return featstore.FeatureSet(
        ids=[f"p{i}:0:0" for i in range(n)],
        domains=[featstore.SOURCE] * n_source + [featstore.TARGET] * (n - n_source),
        vectors=vectors,
    )


def brute_force_knn(vectors, k):
    """Exhaustive oracle: per-node neighbor list by descending cosine, ties by id."""
    v = np.asarray(vectors, dtype=np.float64)
    sims = np.clip(v @ v.T, 0, 1)
    n = len(v)
    out = []
    for i in range(n):
        candidates = [(-sims[i, j], j) for j in range(n) if j != i]
        candidates.sort()
        out.append([j for _, j in candidates[:k]])
    return out


def test_collinear_three_points_mutual_k1():
    # angles 0, 45, 90 degrees: middle point ties, tie broken toward lower id
    vectors = np.array([[1.0, 0.0], [np.sqrt(2) / 2, np.sqrt(2) / 2], [0.0, 1.0]])
    featset = make_set(vectors, n_source=1)
    affinity = graph.build_mutual_knn(featset, k=1, gamma=1.0)
    dense = affinity.entries.toarray()
    assert dense[0, 1] > 0 and dense[1, 0] > 0
    assert dense[1, 2] == 0 and dense[2, 1] == 0
    assert dense[0, 2] == 0
    assert np.count_nonzero(dense) == 2  # the single surviving mutual edge


def test_full_k_equals_dense_similarity():
    rng = np.random.default_rng(4)
    featset = featstore.normalize(make_set(rng.standard_normal((9, 5))))
    affinity = graph.build_mutual_knn(featset, k=8, gamma=3.0)
    sims = featstore.similarity_matrix(featset.vectors, gamma=3.0)
    np.fill_diagonal(sims, 0.0)
    assert np.allclose(affinity.entries.toarray(), sims)


def test_k_too_large():
    featset = featstore.normalize(make_set(np.eye(4, dtype=np.float32)))
    with pytest.raises(FragdiffError) as err:
        graph.build_mutual_knn(featset, k=4)
    assert err.value.code == "k-too-large"


def test_mutuality_against_oracle():
    rng = np.random.default_rng(8)
    featset = featstore.normalize(make_set(rng.standard_normal((30, 6))))
    k = 4
    affinity = graph.build_mutual_knn(featset, k=k, gamma=3.0)
    neighbor_lists = brute_force_knn(featset.vectors, k)
    dense = affinity.entries.toarray()
    for i in range(30):
        for j in range(30):
            if dense[i, j] > 0:
                assert j in neighbor_lists[i] and i in neighbor_lists[j]
            elif i != j:
                assert not (j in neighbor_lists[i] and i in neighbor_lists[j])


def test_affinity_symmetric_zero_diagonal():
    rng = np.random.default_rng(13)
    featset = featstore.normalize(make_set(rng.standard_normal((25, 7))))
    affinity = graph.build_mutual_knn(featset, k=5)
    dense = affinity.entries.toarray()
    assert np.array_equal(dense, dense.T)
    assert np.all(np.diag(dense) == 0)
    assert np.all(dense >= 0)


def test_normalize_two_node_example():
    vectors = np.array([[1.0, 0.0], [np.cos(0.65), np.sin(0.65)]], dtype=np.float32)
    featset = make_set(vectors, n_source=1)
    affinity = graph.build_mutual_knn(featset, k=1, gamma=1.0)
    # overwrite the weight so the hand case is exact
    affinity.entries.data[:] = 0.5
    normalized = graph.normalize(affinity)
    assert normalized.degrees == pytest.approx([0.5, 0.5])
    assert normalized.entries.toarray()[0, 1] == pytest.approx(1.0)


def test_isolated_node_zero_row():
    import scipy.sparse as sp

    entries = sp.csr_matrix(np.array([[0, 0.5, 0], [0.5, 0, 0], [0, 0, 0]]))
    affinity = graph.AffinityGraph(
        entries=entries, k=1, gamma=1.0,
        ids=["a:0:0", "b:0:0", "c:0:0"],
        domains=[featstore.SOURCE, featstore.TARGET, featstore.TARGET],
    )
    assert list(affinity.isolated_nodes) == [2]
    normalized = graph.normalize(affinity)
    dense = normalized.entries.toarray()
    assert np.all(dense[2] == 0) and np.all(dense[:, 2] == 0)


def test_spectral_radius_at_most_one():
    rng = np.random.default_rng(21)
    for trial in range(5):
        featset = featstore.normalize(make_set(rng.standard_normal((20, 6))))
        affinity = graph.build_mutual_knn(featset, k=3 + trial)
        normalized = graph.normalize(affinity)
        eigenvalues = np.linalg.eigvalsh(normalized.entries.toarray())
        assert np.max(np.abs(eigenvalues)) <= 1 + 1e-9


def test_block_shapes_and_transpose():
    rng = np.random.default_rng(31)
    featset = featstore.normalize(make_set(rng.standard_normal((5, 4)), n_source=2))
    affinity = graph.build_mutual_knn(featset, k=3)
    blocks = graph.split_blocks(graph.normalize(affinity))
    assert blocks.gallery_gallery().shape == (3, 3)
    assert blocks.gallery_query().shape == (3, 2)
    assert np.allclose(blocks.gallery_query().toarray(), blocks.query_gallery().toarray().T)
    # the four blocks tile the matrix exactly
    s = graph.normalize(affinity).entries.toarray()
    qq = blocks.query_query().toarray()
    qd = blocks.query_gallery().toarray()
    dq = blocks.gallery_query().toarray()
    dd = blocks.gallery_gallery().toarray()
    tiled = np.block([[qq, qd], [dq, dd]])
    perm = np.concatenate([blocks.query_idx, blocks.gallery_idx])
    assert np.allclose(tiled, s[np.ix_(perm, perm)])


def test_empty_gallery_rejected():
    rng = np.random.default_rng(41)
    featset = featstore.normalize(make_set(rng.standard_normal((4, 4)), n_source=4))
    affinity = graph.build_mutual_knn(featset, k=2)
    with pytest.raises(FragdiffError) as err:
        graph.split_blocks(graph.normalize(affinity))
    assert err.value.code == "bad-partition"


def test_graph_persistence_roundtrip(tmp_path):
    rng = np.random.default_rng(51)
    featset = featstore.normalize(make_set(rng.standard_normal((18, 5))))
    affinity = graph.build_mutual_knn(featset, k=4, feature_checksum="abc123")
    path = tmp_path / "g.fgg"
    graph.save(affinity, path)
    back = graph.load(path)
    assert back.ids == affinity.ids
    assert back.domains == affinity.domains
    assert back.k == affinity.k and back.gamma == affinity.gamma
    assert back.feature_checksum == "abc123"
    assert np.allclose(back.entries.toarray(), affinity.entries.toarray(), atol=1e-7)


def test_build_deterministic():
    rng = np.random.default_rng(61)
    vectors = rng.standard_normal((22, 6))
    a = graph.build_mutual_knn(featstore.normalize(make_set(vectors)), k=5)
    b = graph.build_mutual_knn(featstore.normalize(make_set(vectors)), k=5)
    assert np.array_equal(a.entries.toarray(), b.entries.toarray())
