import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hef import cache as C
from hef.embedder import EmbedderConfig
from hef.errors import ContractError
from hef.index import HnswConfig, HnswIndex, brute_force, build_index, ensure_index, recall_at_k

from conftest import small_function, unit_rows


def oracle(vectors, q, k, ids=None):
    """Plain numpy top-k with the (score desc, id asc) rule."""
    v = np.asarray(vectors, np.float32).astype(np.float64)
    ids = np.arange(len(v)) if ids is None else np.asarray(ids)
    s = v @ np.asarray(q, np.float32).astype(np.float64)
    order = sorted(range(len(v)), key=lambda i: (-s[i], int(ids[i])))[:k]
    return [int(ids[i]) for i in order], [float(s[i]) for i in order]


def test_single_node_index():
    v = np.array([[1.0, 0.0, 0.0, 0.0]], np.float32)
    idx = HnswIndex.build(v, [7])
    hits = idx.search(np.array([0, 1, 0, 0], np.float32), k=5)
    assert [(h.node_id, h.score) for h in hits] == [(7, 0.0)]


def test_hand_computed_five_vectors():
    s = np.sqrt(0.5)
    V = np.array([[1, 0], [0, 1], [s, s], [-1, 0], [s, -s]], np.float32)
    q = np.array([1, 0], np.float32)
    hits = HnswIndex.build(V).search(q, k=3)
    # cosines: 1, 0, .7071, -1, .7071; ties at .7071 broken by id (2 before 4)
    assert [h.node_id for h in hits] == [0, 2, 4]
    assert hits[1].score == pytest.approx(np.float64(np.float32(s)) * 1.0, abs=1e-7)


def test_two_orthogonal_vectors_tie_by_id():
    V = np.array([[1, 0], [0, 1]], np.float32)
    q = np.array([np.sqrt(0.5), np.sqrt(0.5)], np.float32)
    hits = HnswIndex.build(V, [9, 3]).search(q, k=2)
    assert [h.node_id for h in hits] == [3, 9]
    assert hits[0].score == hits[1].score


def test_duplicate_vectors_rank_by_id(rng):
    base = unit_rows(rng, 1, 16)[0]
    V = np.vstack([base] * 6 + list(unit_rows(rng, 20, 16)))
    ids = np.arange(100, 126)[::-1]
    hits = HnswIndex.build(V, ids).search(base, k=6, ef_search=26)
    assert [h.node_id for h in hits] == sorted(ids[:6].tolist())


def test_k_larger_than_n_returns_everything(rng):
    V = unit_rows(rng, 7, 8)
    hits = HnswIndex.build(V).search(V[0], k=50)
    assert len(hits) == 7
    assert sorted(h.node_id for h in hits) == list(range(7))


def test_rejects_non_unit_rows_and_bad_queries(rng):
    V = unit_rows(rng, 5, 8)
    with pytest.raises(ContractError):
        HnswIndex.build(V * 1.01)
    with pytest.raises(ContractError):
        HnswIndex.build(np.zeros((0, 8), np.float32))
    idx = HnswIndex.build(V)
    with pytest.raises(ContractError):
        idx.search(np.ones(4, np.float32))
    with pytest.raises(ContractError):
        idx.search(V[0], k=0)


@settings(max_examples=25)
@given(st.integers(1, 300), st.integers(2, 24), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_exhaustive_search_equals_oracle(n, d, k, seed):
    rng = np.random.default_rng(seed)
    V = unit_rows(rng, n, d)
    ids = rng.permutation(10 * n)[:n]
    q = unit_rows(rng, 1, d)[0]
    idx = HnswIndex.build(V, ids, cfg=HnswConfig(M=4, ef_construction=16, seed=seed % 7))
    hits = idx.search(q, k=k, ef_search=n)
    want_ids, want_scores = oracle(V, q, k, ids)
    assert [h.node_id for h in hits] == want_ids
    assert np.allclose([h.score for h in hits], want_scores, atol=1e-12)
    assert [h.node_id for h in brute_force(V, q, k, ids)] == want_ids


@settings(max_examples=25)
@given(st.integers(2, 200), st.integers(0, 2**32 - 1))
def test_oracle_dominates_and_scores_are_bounded(n, seed):
    rng = np.random.default_rng(seed)
    V = unit_rows(rng, n, 16)
    q = unit_rows(rng, 1, 16)[0]
    idx = HnswIndex.build(V, cfg=HnswConfig(M=4, ef_construction=8))
    approx = idx.search(q, k=10, ef_search=10)
    exact = idx.brute_force(q, k=10)
    for a, e in zip(approx, exact):
        assert a.score <= e.score + 1e-12
    for h in approx:
        assert -1 - 1e-5 <= h.score <= 1 + 1e-5
    scores = [h.score for h in approx]
    assert scores == sorted(scores, reverse=True)


def test_recall_grows_with_ef_search():
    rng = np.random.default_rng(5)
    V = unit_rows(rng, 3000, 32)
    Q = unit_rows(rng, 60, 32)
    idx = HnswIndex.build(V, cfg=HnswConfig(M=8, ef_construction=64))
    recalls = []
    for ef in (16, 64, 256, 3000):
        r = [recall_at_k(idx.search(q, 16, ef), idx.brute_force(q, 16)) for q in Q]
        recalls.append(np.mean(r))
    assert all(b >= a - 0.01 for a, b in zip(recalls, recalls[1:]))
    assert recalls[-1] == 1.0


def test_every_row_reachable_after_repair(rng):
    # clustered data is where greedy graphs strand points
    centers = unit_rows(rng, 4, 16)
    V = np.vstack([c + 0.01 * rng.standard_normal((50, 16)) for c in centers])
    V = (V / np.linalg.norm(V, axis=1, keepdims=True)).astype(np.float32)
    idx = HnswIndex.build(V, cfg=HnswConfig(M=2, ef_construction=4))
    for q in V[::17]:
        hits = idx.search(q, k=200, ef_search=200)
        assert len({h.node_id for h in hits}) == 200


def test_construction_is_deterministic(rng):
    V = unit_rows(rng, 500, 16)
    a, b = HnswIndex.build(V), HnswIndex.build(V)
    for (name, x), (_, y) in zip(a.to_arrays(), b.to_arrays()):
        assert np.array_equal(x, y), name


def test_index_persists_with_cache(tmp_path):
    repo = {f"m{i}.py": small_function(f"f{i}") for i in range(40)}
    c = C.build_cache(repo, EmbedderConfig(dim=32))
    idx = build_index(c)
    C.save(c, tmp_path / "c.hefc")
    back = C.load(tmp_path / "c.hefc")
    assert back.index is not None
    q = c.leaves()[3].vector
    assert back.index.search(q, 8) == idx.search(q, 8)
    assert ensure_index(back) is back.index
    back.index = None
    assert ensure_index(back).search(q, 8) == idx.search(q, 8)


def test_hits_carry_cache_levels():
    repo = {f"m{i}.py": small_function(f"f{i}") for i in range(10)}
    c = C.build_cache(repo, EmbedderConfig(dim=32))
    idx = build_index(c)
    for h in idx.search(c.nodes[c.root_id].vector, k=len(c.nodes)):
        assert h.level == c.nodes[h.node_id].level
