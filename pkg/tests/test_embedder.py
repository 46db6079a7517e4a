import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hef.embedder import (
    EmbedderConfig,
    check_unit,
    embed,
    embed_many,
    embed_tokens,
    export_vectors,
    import_vectors,
)
from hef.errors import ConfigError, VectorImportError


def test_deterministic():
    cfg = EmbedderConfig()
    t = "def f(x):\n    return x + 1\n"
    assert embed(t, cfg).tobytes() == embed(t, cfg).tobytes()


def test_empty_text_is_first_basis_vector():
    v = embed("", EmbedderConfig(dim=64))
    assert v.dtype == np.float32 and v.shape == (64,)
    assert v[0] == 1.0 and not v[1:].any()


def test_config_validation():
    for bad in (8, 100, 2**17):
        with pytest.raises(ConfigError):
            EmbedderConfig(dim=bad)
    with pytest.raises(ConfigError):
        EmbedderConfig(ngram_orders=(0, 1))
    assert EmbedderConfig(ngram_orders=(3, 1, 1)).ngram_orders == (1, 3)


def test_disjoint_vocabularies_nearly_orthogonal():
    cfg = EmbedderConfig(dim=2**16)
    rng = np.random.default_rng(0)
    cos = []
    for i in range(100):
        a = [f"a{i}_{k}" for k in rng.integers(0, 10**6, size=40)]
        b = [f"b{i}_{k}" for k in rng.integers(0, 10**6, size=40)]
        cos.append(abs(float(embed_tokens(a, cfg) @ embed_tokens(b, cfg))))
    assert max(cos) < 0.1


def test_single_token_matches_hand_count():
    # one unigram, no higher orders: exactly one bucket with value +-1
    v = embed_tokens(["tok"], EmbedderConfig(dim=32, ngram_orders=(1,)))
    assert np.count_nonzero(v) == 1 and abs(abs(v).max() - 1.0) < 1e-7


def test_repeated_token_accumulates():
    cfg = EmbedderConfig(dim=32, ngram_orders=(1,))
    assert np.array_equal(embed_tokens(["t"] * 5, cfg), embed_tokens(["t"], cfg))


def test_seed_changes_buckets():
    t = "alpha beta gamma delta"
    assert not np.array_equal(embed(t, EmbedderConfig(seed=1)), embed(t, EmbedderConfig(seed=2)))


def test_batch_equals_single():
    cfg = EmbedderConfig(dim=128)
    texts = ["", "x", "def f(a, b):\n    return a * b\n", "x y z " * 50, "é ü 漢字"]
    batch = embed_many(texts, cfg, batch=2)
    for t, row in zip(texts, batch):
        assert row.tobytes() == embed(t, cfg).tobytes()


def test_import_three_records(tmp_path):
    p = tmp_path / "v.jsonl"
    p.write_text("".join(json.dumps({"chunk_id": i, "values": [float(i + 1)] * 16}) + "\n" for i in range(3)))
    vecs = import_vectors(p, 16)
    assert sorted(vecs) == [0, 1, 2]
    assert all(check_unit(v) for v in vecs.values())


def test_import_renormalizes(tmp_path):
    p = tmp_path / "v.jsonl"
    p.write_text(json.dumps({"chunk_id": 7, "values": [2.0] + [0.0] * 15}) + "\n")
    v = import_vectors(p, 16)[7]
    assert math.isclose(float(np.linalg.norm(v)), 1.0, abs_tol=1e-7)


def test_import_dim_mismatch_names_chunk(tmp_path):
    p = tmp_path / "v.jsonl"
    p.write_text(json.dumps({"chunk_id": 1, "values": [1.0] * 256}) + "\n"
                 + json.dumps({"chunk_id": 99, "values": [1.0] * 255}) + "\n")
    with pytest.raises(VectorImportError, match=r"line 2: chunk_id 99"):
        import_vectors(p, 256)


def test_import_malformed_line_number(tmp_path):
    p = tmp_path / "v.jsonl"
    p.write_text(json.dumps({"chunk_id": 1, "values": [1.0] * 4}) + "\n{not json\n")
    with pytest.raises(VectorImportError, match="line 2"):
        import_vectors(p, 4)


def test_import_zero_vector_rejected(tmp_path):
    p = tmp_path / "v.jsonl"
    p.write_text(json.dumps({"chunk_id": 3, "values": [0.0] * 4}) + "\n")
    with pytest.raises(VectorImportError, match="chunk_id 3"):
        import_vectors(p, 4)


def test_export_import_round_trip(tmp_path):
    cfg = EmbedderConfig(dim=16)
    vecs = {i: embed(f"text {i}", cfg) for i in range(5)}
    export_vectors(vecs, tmp_path / "o.jsonl")
    back = import_vectors(tmp_path / "o.jsonl", 16)
    for k in vecs:
        np.testing.assert_allclose(back[k], vecs[k], atol=1e-7)


@given(st.text(max_size=300), st.sampled_from([16, 64, 256]), st.integers(0, 2**64 - 1))
def test_always_unit_norm(text, dim, seed):
    v = embed(text, EmbedderConfig(dim=dim, seed=seed))
    assert v.shape == (dim,) and check_unit(v)


@given(st.lists(st.text(max_size=40), max_size=12))
def test_batch_bit_identical_property(texts):
    cfg = EmbedderConfig(dim=32)
    out = embed_many(texts, cfg, batch=3)
    for t, row in zip(texts, out):
        assert row.tobytes() == embed(t, cfg).tobytes()
