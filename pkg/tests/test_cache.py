import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hef import cache as C
from hef.embedder import EmbedderConfig
from hef.errors import (
    CacheChecksumError,
    CacheFormatError,
    CacheInvariantError,
    CacheTruncatedError,
    ContractError,
    EmptyRepoError,
    StaleParamsError,
)
from hef.fuser import AttnFuser, FuserParams, MeanFuser

from conftest import small_function

CFG = EmbedderConfig(dim=32)


def funcs(prefix, n):
    return "\n".join(small_function(f"{prefix}_{i}") for i in range(n))


def test_one_file_one_chunk_two_nodes():
    c = C.build_cache({"a.py": small_function("f")}, CFG)
    assert len(c.nodes) == 2
    root = c.nodes[c.root_id]
    assert root.level == 1 and len(root.children) == 1
    C.validate(c)


def test_twenty_chunks_give_24_nodes():
    c = C.build_cache({"a.py": funcs("f", 20)}, CFG, b=8)
    assert len(c.leaves()) == 20
    level1 = sorted(len(n.children) for n in c.nodes.values() if n.level == 1)
    assert level1 == [4, 8, 8]
    assert len(c.nodes) == 20 + 3 + 1 == 24


def test_64_single_chunk_files_give_137_nodes():
    repo = {f"m{i:02d}.py": small_function(f"f{i}") for i in range(64)}
    c = C.build_cache(repo, CFG, b=8)
    by_level = np.bincount(c.levels())
    assert by_level.tolist() == [64, 64, 8, 1]
    assert len(c.nodes) == 137
    C.validate(c)


def test_three_file_fixture_hand_count():
    # a.py: 3 chunks -> 1 file node; b.py: 10 chunks -> 8+2 runs -> 2 nodes -> 1 file node;
    # sub/c.py: 1 chunk -> 1 file node, passed through the single-entry directory;
    # root directory fuses [a.py, b.py, sub] -> 1 node. 14 + 1 + 3 + 1 + 1 = 20.
    repo = {"a.py": funcs("a", 3), "b.py": funcs("b", 10), "sub/c.py": funcs("c", 1)}
    c = C.build_cache(repo, CFG, b=8)
    assert len(c.leaves()) == 14
    assert len(c.nodes) == 20
    assert C.expected_node_count(c) == 20
    root = c.nodes[c.root_id]
    assert [c.nodes[k].group_key for k in root.children] == ["a.py", "b.py", "sub/c.py"]


def test_sibling_order_is_byte_then_path_order():
    repo = {"z.py": funcs("z", 2), "a/b.py": funcs("ab", 2), "a.py": funcs("a", 2)}
    c = C.build_cache(repo, CFG)
    root = c.nodes[c.root_id]
    # directory "a" holds one file, so that file's node passes through in its place
    assert [c.nodes[k].group_key for k in root.children] == ["a/b.py", "a.py", "z.py"]
    for node in c.nodes.values():
        if node.level == 1:
            starts = [c.nodes[k].span_refs[0][1][0] for k in node.children]
            assert starts == sorted(starts)


def test_empty_repo_rejected():
    with pytest.raises(EmptyRepoError):
        C.build_cache({"a.py": "", "b.py": "\n\n"}, CFG)
    with pytest.raises(ContractError):
        C.build_cache({"a.py": "x = 1\n"}, CFG, b=1)


def test_zero_chunk_file_is_skipped():
    c = C.build_cache({"a.py": small_function("f"), "empty.py": ""}, CFG)
    assert all(n.span_refs[0][0] == "a.py" for n in c.leaves())


def test_imported_vectors_used_for_leaves():
    from hef.corpus import chunk_file

    chunks = chunk_file("a.py", funcs("f", 3), repo_id="r")
    rng = np.random.default_rng(0)
    vecs = {}
    for ch in chunks:
        v = rng.standard_normal(32)
        vecs[ch.chunk_id] = (v / np.linalg.norm(v)).astype(np.float32)
    c = C.build_cache({"a.py": funcs("f", 3)}, CFG, repo_id="r", vectors=vecs)
    for leaf in c.leaves():
        assert leaf.vector.tobytes() == vecs[leaf.chunk_id].tobytes()
    with pytest.raises(ContractError):
        C.build_cache({"a.py": funcs("f", 3)}, CFG, repo_id="other", vectors=vecs)


def test_tree_plan_reproduces_root():
    repo = {"a.py": funcs("a", 11), "d/b.py": funcs("b", 3), "d/e/c.py": funcs("c", 2)}
    p = FuserParams.init(32, 8, 2, seed=0)
    for fuser in (MeanFuser(), AttnFuser(p)):
        c = C.build_cache(repo, CFG, fuser)
        root = C.tree_plan(c).root_with(fuser)
        assert root.tobytes() == c.nodes[c.root_id].vector.tobytes()


# ---------------------------------------------------------------- invariant checks


def test_check_tree_detects_broken_parent():
    c = C.build_cache({"a.py": funcs("a", 5)}, CFG)
    leaf = c.leaves()[0]
    leaf.parent = None
    with pytest.raises(CacheInvariantError):
        C.check_tree(c)


def test_check_provenance_detects_dropped_span():
    c = C.build_cache({"a.py": funcs("a", 5)}, CFG)
    root = c.nodes[c.root_id]
    root.span_refs = root.span_refs[:-1]
    with pytest.raises(CacheInvariantError):
        C.check_provenance(c)


def test_check_norms_detects_scaled_vector():
    c = C.build_cache({"a.py": funcs("a", 2)}, CFG)
    c.leaves()[0].vector = c.leaves()[0].vector * 2
    with pytest.raises(CacheInvariantError):
        C.check_norms(c)


# ---------------------------------------------------------------- updates

REPO = {f"p{i % 4}/m{i:03d}.py": funcs(f"m{i}", 1 + i % 5) for i in range(100)}


@pytest.fixture(scope="module")
def base_cache():
    return C.build_cache(REPO, CFG, b=8)


def test_no_changes_returns_same_cache(base_cache):
    assert C.update_cache(base_cache, [], CFG, MeanFuser()) is base_cache


def test_single_file_edit_bounded_and_equal_to_rebuild(base_cache):
    path = "p1/m041.py"
    new_src = funcs("edited", 3)
    upd = C.update_cache(base_cache, [(path, new_src)], CFG, MeanFuser())
    full = C.build_cache({**REPO, path: new_src}, CFG, b=8)
    assert C.encode_cache(upd) == C.encode_cache(full)
    assert upd.stats.recomputed <= 3 + upd.build_meta.level_count
    # everything not on the edited path is untouched
    changed = {n.node_id for n in upd.nodes.values() if n.node_id not in base_cache.nodes}
    for nid, node in upd.nodes.items():
        if nid in base_cache.nodes:
            assert node.vector.tobytes() == base_cache.nodes[nid].vector.tobytes()
    assert len(changed) == upd.stats.recomputed


def test_add_and_delete_files(base_cache):
    upd = C.update_cache(base_cache, {"p0/m000.py": None, "new/x.py": funcs("x", 2)}, CFG, MeanFuser())
    repo = dict(REPO)
    del repo["p0/m000.py"]
    repo["new/x.py"] = funcs("x", 2)
    assert C.encode_cache(upd) == C.encode_cache(C.build_cache(repo, CFG, b=8))


def test_deleting_only_file_is_error():
    c = C.build_cache({"a.py": funcs("a", 2)}, CFG)
    with pytest.raises(EmptyRepoError):
        C.update_cache(c, [("a.py", None)], CFG, MeanFuser())


def test_stale_params_rejected(base_cache):
    with pytest.raises(StaleParamsError):
        C.update_cache(base_cache, [("p0/m000.py", "x = 1\n")], CFG, AttnFuser(FuserParams.init(32, 8, 2)))
    with pytest.raises(StaleParamsError):
        C.update_cache(base_cache, [("p0/m000.py", "x = 1\n")], EmbedderConfig(dim=64), MeanFuser())


@settings(max_examples=15)
@given(st.lists(st.tuples(st.integers(0, 11), st.integers(0, 4)), min_size=1, max_size=4))
def test_update_equals_rebuild_property(edits):
    repo = {f"d{i % 3}/f{i}.py": funcs(f"f{i}", 1 + i % 4) for i in range(12)}
    p = FuserParams.init(32, 8, 2, seed=1)
    fuser = AttnFuser(p)
    cache = C.build_cache(repo, CFG, fuser, b=3)
    state = dict(repo)
    for k, (i, n) in enumerate(edits):
        path = f"d{i % 3}/f{i}.py"
        src = funcs(f"e{k}", n) if n else None
        if src is None and len(state) == 1:
            continue
        if src is None:
            state.pop(path, None)
        else:
            state[path] = src
        cache = C.update_cache(cache, [(path, src)], CFG, fuser)
    assert C.encode_cache(cache) == C.encode_cache(C.build_cache(state, CFG, fuser, b=3))


# ---------------------------------------------------------------- persistence


def test_save_load_round_trip(tmp_path, base_cache):
    C.save(base_cache, tmp_path / "c.hefc")
    back = C.load(tmp_path / "c.hefc")
    assert C.encode_cache(back) == (tmp_path / "c.hefc").read_bytes()
    assert back.root_id == base_cache.root_id
    for nid, node in base_cache.nodes.items():
        other = back.nodes[nid]
        assert other.vector.tobytes() == node.vector.tobytes()
        assert (other.parent, other.children, other.span_refs, other.group_key, other.chunk_id) == (
            node.parent, node.children, node.span_refs, node.group_key, node.chunk_id)


def test_attn_params_round_trip(tmp_path):
    p = FuserParams.init(32, 8, 2, seed=4)
    c = C.build_cache({"a.py": funcs("a", 9)}, CFG, AttnFuser(p))
    C.save(c, tmp_path / "c.hefc")
    back = C.load(tmp_path / "c.hefc")
    assert back.fuser_params.digest() == p.digest()
    assert back.fuser().digest() == c.fuser_params_hash


def test_same_inputs_same_bytes():
    a = C.encode_cache(C.build_cache(REPO, CFG))
    b = C.encode_cache(C.build_cache(REPO, CFG))
    assert a == b


def test_wrong_magic(tmp_path, base_cache):
    data = bytearray(C.encode_cache(base_cache))
    data[0:4] = b"NOPE"
    with pytest.raises(CacheFormatError, match="magic"):
        C.decode_cache(bytes(data))


def test_unsupported_version(base_cache):
    data = bytearray(C.encode_cache(base_cache))
    data[4] = 99
    with pytest.raises(CacheFormatError, match="version"):
        C.decode_cache(bytes(data))


def test_truncated_file(base_cache):
    data = C.encode_cache(base_cache)
    for cut in (3, 20, len(data) // 2, len(data) - 1):
        with pytest.raises(CacheTruncatedError):
            C.decode_cache(data[:cut])


def test_flipped_vector_byte_fails_checksum(base_cache):
    data = bytearray(C.encode_cache(base_cache))
    data[-10] ^= 0x40
    with pytest.raises(CacheChecksumError):
        C.decode_cache(bytes(data))


def test_invariant_violation_with_valid_checksums(base_cache):
    bad = C.build_cache({"a.py": funcs("a", 4)}, CFG)
    leaf = bad.leaves()[0]
    leaf.vector = (leaf.vector * 1.5).astype(np.float32)
    with pytest.raises(CacheInvariantError):
        C.decode_cache(C.encode_cache(bad))


def test_section_crc_covers_tag_and_length():
    sec = C._section(b"TEST", b"payload")
    assert int.from_bytes(sec[-4:], "little") == zlib.crc32(sec[:-4])


@settings(max_examples=10)
@given(st.dictionaries(
    st.from_regex(r"([a-c]/){0,3}[a-e]\.py", fullmatch=True),
    st.integers(1, 20),
    min_size=1, max_size=12,
), st.integers(2, 9))
def test_generated_repos_satisfy_invariants(layout, b):
    repo = {path: funcs(f"f{k}", n) for k, (path, n) in enumerate(layout.items())}
    c = C.build_cache(repo, CFG, b=b)
    C.validate(c)
    assert len(c.nodes) == C.expected_node_count(c) <= C.node_count_bound(c)
    assert C.decode_cache(C.encode_cache(c)).root_id == c.root_id
