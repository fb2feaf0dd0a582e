import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fragdiff import featstore
from fragdiff.errors import FragdiffError


def small_set(vectors, domains=None):
    vectors = np.asarray(vectors, dtype=np.float32)
    n = len(vectors)
    domains = domains or [featstore.SOURCE] * (n // 2) + [featstore.TARGET] * (n - n // 2)
    ids = [f"p{i}:0:0" for i in range(n)]
    return featstore.FeatureSet(ids=ids, domains=domains, vectors=vectors)


def test_save_load_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    featset = small_set(rng.standard_normal((10, 6)))
    path = tmp_path / "f.json"
    featstore.save(featset, path)
    back = featstore.load(path)
    assert back.ids == featset.ids
    assert back.domains == featset.domains
    assert back.vectors.tobytes() == featset.vectors.tobytes()


def test_manifest_dimension_mismatch(tmp_path):
    featset = small_set(np.ones((4, 32), dtype=np.float32))
    path = tmp_path / "f.json"
    featstore.save(featset, path)
    manifest = (path).read_text().replace('"d": 32', '"d": 64')
    path.write_text(manifest)
    with pytest.raises(FragdiffError) as err:
        featstore.load(path)
    assert err.value.code == "manifest-mismatch"


def test_corrupt_blob_checksum(tmp_path):
    featset = small_set(np.ones((4, 8), dtype=np.float32))
    path = tmp_path / "f.json"
    featstore.save(featset, path)
    blob = tmp_path / "f.fgf"
    raw = bytearray(blob.read_bytes())
    raw[-1] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(FragdiffError) as err:
        featstore.load(path)
    assert err.value.code == "manifest-mismatch"


def test_nan_component_rejected():
    vectors = np.ones((3, 4), dtype=np.float32)
    vectors[1, 2] = np.nan
    with pytest.raises(FragdiffError) as err:
        small_set(vectors)
    assert err.value.code == "corrupt-feature"


def test_normalize_three_four_five():
    featset = small_set(np.array([[3.0, 4.0], [1.0, 0.0]]))
    normalized = featstore.normalize(featset)
    assert normalized.vectors[0] == pytest.approx([0.6, 0.8])
    assert normalized.ids == featset.ids


def test_normalize_idempotent():
    rng = np.random.default_rng(1)
    featset = featstore.normalize(small_set(rng.standard_normal((6, 5))))
    again = featstore.normalize(featset)
    assert np.allclose(again.vectors, featset.vectors, atol=1e-9)


def test_normalize_rejects_zero_vector():
    featset = small_set(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(FragdiffError) as err:
        featstore.normalize(featset)
    assert err.value.code == "zero-vector"


def test_similarity_values():
    assert featstore.similarity(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == pytest.approx(1.0)
    assert featstore.similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    assert featstore.similarity(np.array([1.0, 0.0]), np.array([0.6, 0.8]), gamma=3) == pytest.approx(0.216)


def test_similarity_dim_mismatch():
    with pytest.raises(FragdiffError) as err:
        featstore.similarity(np.ones(3), np.ones(4))
    assert err.value.code == "dim-mismatch"


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3),
    st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3),
    st.floats(0.5, 6),
)
def test_similarity_symmetric_bounded(xs, ys, gamma):
    x = np.asarray(xs)
    y = np.asarray(ys)
    if np.linalg.norm(x) < 1e-6 or np.linalg.norm(y) < 1e-6:
        return
    x = x / np.linalg.norm(x)
    y = y / np.linalg.norm(y)
    s_xy = featstore.similarity(x, y, gamma)
    s_yx = featstore.similarity(y, x, gamma)
    assert s_xy == pytest.approx(s_yx, abs=1e-12)
    assert 0.0 <= s_xy <= 1.0


def test_similarity_monotone_in_cosine():
    x = np.array([1.0, 0.0])
    angles = np.linspace(0, np.pi / 2, 12)
    scores = [featstore.similarity(x, np.array([np.cos(a), np.sin(a)]), gamma=3) for a in angles]
    assert all(a >= b for a, b in zip(scores, scores[1:]))


def test_synth_deterministic():
    a, la = featstore.synth_two_domain(12, 12, 8, 3, domain_shift=0.2, seed=7)
    b, lb = featstore.synth_two_domain(12, 12, 8, 3, domain_shift=0.2, seed=7)
    assert a.ids == b.ids
    assert np.array_equal(a.vectors, b.vectors)
    assert la == lb


def test_synth_zero_shift_nearest_source_same_cluster():
    featset, labels = featstore.synth_two_domain(30, 30, 10, 5, domain_shift=0.0, seed=3, noise=0.05)
    normalized = featstore.normalize(featset)
    src_idx = normalized.indices_of(featstore.SOURCE)
    tgt_idx = normalized.indices_of(featstore.TARGET)
    vectors = normalized.vectors.astype(np.float64)
    hits = 0
    for ti in tgt_idx:
        # brute-force nearest source by Euclidean distance
        dists = np.linalg.norm(vectors[src_idx] - vectors[ti], axis=1)
        nearest = src_idx[int(np.argmin(dists))]
        hits += labels[normalized.ids[nearest]] == labels[normalized.ids[ti]]
    assert hits == len(tgt_idx)


def test_synth_one_cluster_all_similar():
    featset, _ = featstore.synth_two_domain(10, 10, 6, 1, seed=5, noise=0.03)
    normalized = featstore.normalize(featset)
    sims = featstore.similarity_matrix(normalized.vectors, gamma=1.0)
    off_diag = sims[~np.eye(len(featset), dtype=bool)]
    assert np.all(off_diag > 0)


def test_two_moons_shapes_and_labels():
    featset, labels = featstore.synth_two_moons(40, 40, seed=2)
    assert len(featset) == 80
    assert set(labels.values()) == {0, 1}
    assert featset.counts == (40, 40)
