"""Hierarchical vector cache: construction, incremental update, persistence.

Leaves are chunk embeddings. Each file's chunks (byte order) are fused in
runs of at most ``b`` until one file node remains; each directory then
fuses its files and subdirectories (path-lexicographic order) the same way,
up to the repository root. A group that already consists of a single
fused node is passed upward unchanged, so a lone file under a lone
directory does not create a chain of single-child nodes.

Node ids are Merkle-style digests: a leaf id covers its chunk id and vector
bytes, an internal id covers its level, group key and child ids. Equal ids
therefore mean equal subtrees, which is what lets :func:`update_cache`
reuse every untouched vector and still match a full rebuild bit for bit.
"""

from __future__ import annotations

import hashlib
import io
import logging
import math
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .corpus import MAX_CHUNK_TOKENS, Chunk, chunk_file
from .embedder import NORM_TOL, EmbedderConfig, embed_many
from .errors import (
    CacheChecksumError,
    CacheFormatError,
    CacheInvariantError,
    CacheTruncatedError,
    ContractError,
    EmptyRepoError,
    HefError,
    StaleParamsError,
)
from .fuser import PARAM_NAMES, AttnFuser, Fuser, FuserParams, MeanFuser, TreePlan

logger = logging.getLogger(__name__)

MAGIC = b"HEFC"
VERSION = 1
DEFAULT_BRANCHING = 8

SpanRef = Tuple[str, Tuple[int, int]]


@dataclass
class HierarchyNode:
    node_id: int
    level: int
    vector: np.ndarray
    parent: Optional[int]
    children: Tuple[int, ...]
    span_refs: Tuple[SpanRef, ...]
    group_key: str
    chunk_id: Optional[int] = None

    @property
    def is_leaf(self) -> bool:
        return self.level == 0


@dataclass
class BuildMeta:
    branching_factor: int
    dim: int
    node_count: int
    level_count: int
    max_tokens: int = MAX_CHUNK_TOKENS
    build_seconds: float = 0.0


@dataclass
class UpdateStats:
    embedded_leaves: int = 0
    fused_nodes: int = 0
    reused_nodes: int = 0

    @property
    def recomputed(self) -> int:
        return self.embedded_leaves + self.fused_nodes


@dataclass
class RepoCache:
    repo_id: str
    nodes: Dict[int, HierarchyNode]
    root_id: int
    embedder_cfg: EmbedderConfig
    fuser_params_hash: int
    build_meta: BuildMeta
    fuser_params: Optional[FuserParams] = None
    index: object = None
    stats: UpdateStats = field(default_factory=UpdateStats)

    @property
    def node_ids(self) -> np.ndarray:
        return np.fromiter(self.nodes.keys(), dtype=np.uint64, count=len(self.nodes))

    def matrix(self) -> np.ndarray:
        """All node vectors stacked in node order (float32)."""
        return np.stack([n.vector for n in self.nodes.values()])

    def levels(self) -> np.ndarray:
        return np.fromiter((n.level for n in self.nodes.values()), dtype=np.int64, count=len(self.nodes))

    def fuser(self) -> Fuser:
        return AttnFuser(self.fuser_params) if self.fuser_params is not None else MeanFuser()

    def leaves(self) -> List[HierarchyNode]:
        return [n for n in self.nodes.values() if n.level == 0]

    def leaves_by_file(self) -> Dict[str, List[HierarchyNode]]:
        out: Dict[str, List[HierarchyNode]] = {}
        for node in self.leaves():
            out.setdefault(node.span_refs[0][0], []).append(node)
        for nodes in out.values():
            nodes.sort(key=lambda n: n.span_refs[0][1][0])
        return out

    def ancestors(self, node_id: int) -> List[int]:
        out = []
        parent = self.nodes[node_id].parent
        while parent is not None:
            out.append(parent)
            parent = self.nodes[parent].parent
        return out


# --------------------------------------------------------------------------
# construction


def _digest(*parts: bytes) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(struct.pack("<I", len(p)))
        h.update(p)
    return int.from_bytes(h.digest(), "little")


def leaf_node_id(chunk_id: int, vector: np.ndarray) -> int:
    return _digest(b"leaf", struct.pack("<Q", chunk_id), np.asarray(vector, dtype="<f4").tobytes())


def internal_node_id(level: int, group_key: str, children: Sequence[int]) -> int:
    return _digest(
        b"node",
        struct.pack("<I", level),
        group_key.encode("utf-8"),
        np.asarray(children, dtype="<u8").tobytes(),
    )


@dataclass
class _Leaf:
    chunk_id: int
    span: Tuple[int, int]
    vector: np.ndarray


def _path_key(path: str) -> Tuple[str, ...]:
    return tuple(path.split("/"))


class _Assembler:
    def __init__(self, fuser: Fuser, b: int, reuse: Mapping[int, np.ndarray]):
        self.fuser = fuser
        self.b = b
        self.reuse = reuse
        self.nodes: Dict[int, HierarchyNode] = {}
        self.stats = UpdateStats()

    def add_leaf(self, path: str, leaf: _Leaf) -> HierarchyNode:
        nid = leaf_node_id(leaf.chunk_id, leaf.vector)
        node = HierarchyNode(
            node_id=nid,
            level=0,
            vector=leaf.vector,
            parent=None,
            children=(),
            span_refs=((path, leaf.span),),
            group_key=path,
            chunk_id=leaf.chunk_id,
        )
        if nid in self.nodes:
            raise ContractError(f"duplicate leaf {path}:{leaf.span}")
        self.nodes[nid] = node
        return node

    def _fuse(self, group: List[HierarchyNode], key: str) -> HierarchyNode:
        level = max(n.level for n in group) + 1
        child_ids = tuple(n.node_id for n in group)
        nid = internal_node_id(level, key, child_ids)
        vec = self.reuse.get(nid)
        if vec is None:
            vec = self.fuser.fuse(np.stack([n.vector for n in group]))
            self.stats.fused_nodes += 1
        else:
            self.stats.reused_nodes += 1
        spans: Tuple[SpanRef, ...] = tuple(s for n in group for s in n.span_refs)
        node = HierarchyNode(nid, level, vec, None, child_ids, spans, key)
        for child in group:
            child.parent = nid
        self.nodes[nid] = node
        return node

    def reduce(self, items: List[HierarchyNode], key: str) -> HierarchyNode:
        if len(items) == 1 and items[0].level > 0:
            return items[0]
        cur = items
        while True:
            cur = [self._fuse(cur[i:i + self.b], key) for i in range(0, len(cur), self.b)]
            if len(cur) == 1:
                return cur[0]


def _assemble(
    files: Mapping[str, Sequence[_Leaf]], fuser: Fuser, b: int, reuse: Mapping[int, np.ndarray]
) -> Tuple[Dict[int, HierarchyNode], int, UpdateStats]:
    asm = _Assembler(fuser, b, reuse)
    paths = sorted(files, key=_path_key)
    leaf_nodes = {p: [asm.add_leaf(p, leaf) for leaf in files[p]] for p in paths}

    # directory tree: dir path -> list of (name, file path or subdir path, is_dir)
    tree: Dict[str, Dict[str, Tuple[str, bool]]] = {"": {}}
    for p in paths:
        parts = p.split("/")
        parent = ""
        for i, name in enumerate(parts[:-1]):
            d = "/".join(parts[: i + 1])
            tree.setdefault(parent, {})[name] = (d, True)
            tree.setdefault(d, {})
            parent = d
        tree[parent][parts[-1]] = (p, False)

    def build_dir(d: str) -> HierarchyNode:
        items = []
        for name in sorted(tree[d]):
            target, is_dir = tree[d][name]
            if is_dir:
                items.append(build_dir(target))
            else:
                items.append(asm.reduce(leaf_nodes[target], target))
        return asm.reduce(items, d)

    root = build_dir("")
    asm.stats.embedded_leaves = sum(len(v) for v in files.values())
    return asm.nodes, root.node_id, asm.stats


def _pairs(files) -> Iterable[Tuple[str, object]]:
    return files.items() if isinstance(files, Mapping) else files


def _chunk_repo(repo: Iterable[Tuple[str, Union[str, bytes]]], repo_id: str, max_tokens: int) -> Dict[str, List[Chunk]]:
    out: Dict[str, List[Chunk]] = {}
    for path, source in _pairs(repo):
        p = Path(path).as_posix()
        chunks = chunk_file(p, source, max_tokens, repo_id=repo_id)
        if chunks:
            out[p] = chunks
    return out


def _embed_files(
    chunked: Mapping[str, Sequence[Chunk]],
    cfg: EmbedderConfig,
    vectors: Optional[Mapping[int, np.ndarray]] = None,
) -> Dict[str, List[_Leaf]]:
    flat = [c for p in chunked for c in chunked[p]]
    if vectors is None:
        mat = embed_many([c.text for c in flat], cfg)
    else:
        missing = [c.chunk_id for c in flat if c.chunk_id not in vectors]
        if missing:
            raise ContractError(f"no imported vector for chunk_id {missing[0]}")
        mat = np.stack([np.asarray(vectors[c.chunk_id], dtype=np.float32) for c in flat])
        if mat.shape[1] != cfg.dim:
            raise ContractError(f"imported vectors have dim {mat.shape[1]}, embedder dim is {cfg.dim}")
    out: Dict[str, List[_Leaf]] = {}
    for c, v in zip(flat, mat):
        out.setdefault(c.file_path, []).append(_Leaf(c.chunk_id, c.byte_span, v))
    return out


def _fuser_params_of(fuser: Fuser) -> Optional[FuserParams]:
    return fuser.params if isinstance(fuser, AttnFuser) else None


def build_cache(
    repo: Iterable[Tuple[str, Union[str, bytes]]],
    embedder_cfg: EmbedderConfig,
    fuser: Optional[Fuser] = None,
    b: int = DEFAULT_BRANCHING,
    repo_id: str = "repo",
    max_tokens: int = MAX_CHUNK_TOKENS,
    vectors: Optional[Mapping[int, np.ndarray]] = None,
) -> RepoCache:
    """Chunk, embed and fuse a repository given as ``(path, source)`` pairs.

    ``vectors`` optionally maps chunk ids to externally computed leaf
    embeddings (see :func:`hef.embedder.import_vectors`).
    """
    if b < 2:
        raise ContractError("branching factor must be >= 2")
    fuser = fuser if fuser is not None else MeanFuser()
    params = _fuser_params_of(fuser)
    if params is not None and params.d != embedder_cfg.dim:
        raise ContractError(f"fuser dim {params.d} != embedder dim {embedder_cfg.dim}")
    t0 = time.perf_counter()
    chunked = _chunk_repo(repo, repo_id, max_tokens)
    if not chunked:
        raise EmptyRepoError("repository has no chunkable content")
    files = _embed_files(chunked, embedder_cfg, vectors)
    nodes, root_id, stats = _assemble(files, fuser, b, {})
    elapsed = time.perf_counter() - t0
    meta = BuildMeta(
        branching_factor=b,
        dim=embedder_cfg.dim,
        node_count=len(nodes),
        level_count=max(n.level for n in nodes.values()) + 1,
        max_tokens=max_tokens,
        build_seconds=elapsed,
    )
    logger.info("built cache %s: %d nodes in %.2fs", repo_id, len(nodes), elapsed)
    return RepoCache(repo_id, nodes, root_id, embedder_cfg, fuser.digest(), meta, params, stats=stats)


def update_cache(
    cache: RepoCache,
    changed: Iterable[Tuple[str, Optional[Union[str, bytes]]]],
    embedder_cfg: EmbedderConfig,
    fuser: Fuser,
) -> RepoCache:
    """Apply file edits (``source``) and deletions (``None``) to a cache.

    Only changed files are re-chunked and re-embedded; internal nodes whose
    ids survive are copied, so only ancestors of changed leaves are fused
    again. ``result.stats`` reports the work done.
    """
    if fuser.digest() != cache.fuser_params_hash:
        raise StaleParamsError("fuser parameters differ from those used to build the cache; rebuild required")
    if embedder_cfg != cache.embedder_cfg:
        raise StaleParamsError("embedder configuration differs from the cache; rebuild required")
    changed = list(_pairs(changed))
    if not changed:
        return cache
    t0 = time.perf_counter()
    meta = cache.build_meta
    files: Dict[str, List[_Leaf]] = {
        path: [_Leaf(n.chunk_id, n.span_refs[0][1], n.vector) for n in nodes]
        for path, nodes in cache.leaves_by_file().items()
    }
    edits: Dict[str, List[Chunk]] = {}
    for path, source in changed:
        p = Path(path).as_posix()
        files.pop(p, None)
        edits.pop(p, None)
        if source is not None:
            chunks = chunk_file(p, source, meta.max_tokens, repo_id=cache.repo_id)
            if chunks:
                edits[p] = chunks
    files.update(_embed_files(edits, embedder_cfg))
    if not files:
        raise EmptyRepoError("update would leave the repository empty")
    reuse = {n.node_id: n.vector for n in cache.nodes.values() if n.level > 0}
    nodes, root_id, stats = _assemble(files, fuser, meta.branching_factor, reuse)
    stats.embedded_leaves = sum(len(v) for v in edits.values())
    new_meta = BuildMeta(
        branching_factor=meta.branching_factor,
        dim=meta.dim,
        node_count=len(nodes),
        level_count=max(n.level for n in nodes.values()) + 1,
        max_tokens=meta.max_tokens,
        build_seconds=time.perf_counter() - t0,
    )
    return RepoCache(
        cache.repo_id, nodes, root_id, cache.embedder_cfg, cache.fuser_params_hash, new_meta,
        cache.fuser_params, stats=stats,
    )


def tree_plan(cache: RepoCache) -> TreePlan:
    """Express the cache's hierarchy as a fusion schedule for training."""
    slot: Dict[int, int] = {}
    leaves = []
    for node in cache.nodes.values():
        if node.level == 0:
            slot[node.node_id] = len(leaves)
            leaves.append(node.vector)
    ops = []
    for node in cache.nodes.values():
        if node.level > 0:
            ops.append(tuple(slot[c] for c in node.children))
            slot[node.node_id] = len(leaves) + len(ops) - 1
    if ops and slot[cache.root_id] != len(leaves) + len(ops) - 1:
        raise CacheInvariantError("root is not the last fused node")
    return TreePlan(np.asarray(leaves, dtype=np.float64), ops)


# --------------------------------------------------------------------------
# invariants


def check_tree(cache: RepoCache) -> None:
    """Raise :class:`CacheInvariantError` unless the node graph is a well-formed tree."""
    nodes = cache.nodes
    b = cache.build_meta.branching_factor
    if cache.root_id not in nodes or nodes[cache.root_id].parent is not None:
        raise CacheInvariantError("root missing or has a parent")
    roots = [n for n in nodes.values() if n.parent is None]
    if len(roots) != 1:
        raise CacheInvariantError(f"expected exactly one root, found {len(roots)}")
    for node in nodes.values():
        if node.level == 0:
            if node.children or len(node.span_refs) != 1:
                raise CacheInvariantError(f"leaf {node.node_id} must have no children and one span")
            continue
        if not 1 <= len(node.children) <= b:
            raise CacheInvariantError(f"node {node.node_id} has {len(node.children)} children (b={b})")
        levels = []
        for c in node.children:
            child = nodes.get(c)
            if child is None or child.parent != node.node_id:
                raise CacheInvariantError(f"child link {node.node_id}->{c} is broken")
            levels.append(child.level)
        if node.level != max(levels) + 1:
            raise CacheInvariantError(f"node {node.node_id} level {node.level} != max(child levels) + 1")
    # acyclic + connected: every node reaches the root through strictly increasing levels
    seen = set()
    stack = [cache.root_id]
    while stack:
        nid = stack.pop()
        if nid in seen:
            raise CacheInvariantError(f"node {nid} reached twice")
        seen.add(nid)
        stack.extend(nodes[nid].children)
    if len(seen) != len(nodes):
        raise CacheInvariantError("node graph is not a single tree")


def _leaf_spans(cache: RepoCache, node_id: int) -> List[SpanRef]:
    node = cache.nodes[node_id]
    if node.level == 0:
        return list(node.span_refs)
    out: List[SpanRef] = []
    for c in node.children:
        out.extend(_leaf_spans(cache, c))
    return out


def check_provenance(cache: RepoCache) -> None:
    """Every node's span_refs must equal the ordered union of its descendant leaf spans."""
    memo: Dict[int, Tuple[SpanRef, ...]] = {}
    for node in cache.nodes.values():  # children precede parents in node order
        if node.level == 0:
            memo[node.node_id] = node.span_refs
        else:
            expect = tuple(s for c in node.children for s in memo[c])
            if expect != node.span_refs:
                raise CacheInvariantError(f"span_refs of node {node.node_id} do not match its descendants")
            memo[node.node_id] = expect


def check_norms(cache: RepoCache, tol: float = NORM_TOL) -> None:
    mat = cache.matrix().astype(np.float64)
    if not np.all(np.isfinite(mat)):
        raise CacheInvariantError("non-finite vector component")
    dev = np.abs(np.sqrt((mat * mat).sum(axis=1)) - 1.0)
    if np.any(dev > tol):
        raise CacheInvariantError(f"vector norm deviates from 1 by {dev.max():.3g}")


def _rounds(count: int, b: int) -> int:
    r, c = 0, count
    while True:
        c = -(-c // b)
        r += 1
        if c == 1:
            return r


def group_inputs(cache: RepoCache) -> Dict[str, int]:
    """Number of inputs each group reduction started from, keyed by group key."""
    out: Dict[str, int] = {}
    for node in cache.nodes.values():
        if node.level == 0:
            continue
        n_in = sum(1 for c in node.children if cache.nodes[c].group_key != node.group_key or cache.nodes[c].level == 0)
        out[node.group_key] = out.get(node.group_key, 0) + n_in
    return out


def expected_node_count(cache: RepoCache) -> int:
    """Node count implied by the grouping rule (runs of <= b, repeated per group)."""
    b = cache.build_meta.branching_factor
    total = len(cache.leaves())
    for count in group_inputs(cache).values():
        c = count
        while True:
            c = -(-c // b)
            total += c
            if c == 1:
                break
    return total


def node_count_bound(cache: RepoCache) -> float:
    """Upper bound N + sum over groups of ((inputs - 1)/(b - 1) + rounds).

    For a single group this is ``N*b/(b-1) + levels`` up to the leaf term;
    with one group per file and directory each reduction contributes its own
    rounding slack.
    """
    b = cache.build_meta.branching_factor
    n = len(cache.leaves())
    bound = float(n)
    for count in group_inputs(cache).values():
        bound += (count - 1) / (b - 1) + _rounds(count, b)
    return bound


def single_group_node_bound(n_leaves: int, b: int, levels: int) -> float:
    return n_leaves * b / (b - 1) + levels


def check_node_count(cache: RepoCache) -> None:
    n = len(cache.nodes)
    if n != cache.build_meta.node_count:
        raise CacheInvariantError("build_meta.node_count is stale")
    if n > node_count_bound(cache) + 1e-9:
        raise CacheInvariantError(f"{n} nodes exceeds bound {node_count_bound(cache):.1f}")


def validate(cache: RepoCache) -> None:
    check_tree(cache)
    check_provenance(cache)
    check_norms(cache)
    check_node_count(cache)
    if cache.fuser().digest() != cache.fuser_params_hash:
        raise CacheInvariantError("fuser parameter digest mismatch")


# --------------------------------------------------------------------------
# persistence


def _section(tag: bytes, payload: bytes) -> bytes:
    head = tag + struct.pack("<Q", len(payload))
    return head + payload + struct.pack("<I", zlib.crc32(head + payload))


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CacheTruncatedError(f"{self.what}: unexpected end of data")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, width: str = "<H") -> str:
        (n,) = self.unpack(width)
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CacheFormatError(f"{self.what}: bad string") from exc

    def done(self) -> bool:
        return self.pos == len(self.data)


def _write_string(buf: io.BytesIO, s: str, width: str = "<H") -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack(width, len(raw)))
    buf.write(raw)


def _encode_arrays(arrays: Sequence[Tuple[str, np.ndarray]]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        _write_string(buf, name)
        _write_string(buf, arr.dtype.newbyteorder("<").str)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return buf.getvalue()


def _decode_arrays(payload: bytes, what: str) -> Dict[str, np.ndarray]:
    r = _Reader(payload, what)
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        name = r.string()
        dtype_str = r.string()
        try:
            dtype = np.dtype(dtype_str)
        except TypeError as exc:
            raise CacheFormatError(f"{what}: bad dtype {dtype_str!r}") from exc
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        out[name] = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if not r.done():
        raise CacheFormatError(f"{what}: trailing bytes")
    return out


def encode_cache(cache: RepoCache, index=None) -> bytes:
    """Serialize a cache (and optionally its ANN index) to bytes.

    Wall-clock build time is not written, so equal caches encode to equal
    bytes.
    """
    meta = cache.build_meta
    params = cache.fuser_params
    cfg = cache.embedder_cfg

    head = io.BytesIO()
    _write_string(head, cache.repo_id)
    head.write(struct.pack(
        "<IIIII", meta.dim, meta.branching_factor, params.d_f if params else 0,
        params.heads if params else 0, meta.max_tokens,
    ))
    head.write(struct.pack("<QIQQB", len(cache.nodes), meta.level_count, cache.root_id,
                           cache.fuser_params_hash, 1 if params else 0))
    head.write(struct.pack("<IQB", cfg.dim, cfg.seed, len(cfg.ngram_orders)))
    head.write(struct.pack(f"<{len(cfg.ngram_orders)}B", *cfg.ngram_orders))

    parm = _encode_arrays([(n, getattr(params, n)) for n in PARAM_NAMES]) if params else b""

    body = io.BytesIO()
    for node in cache.nodes.values():
        body.write(struct.pack("<QIBQBQ", node.node_id, node.level,
                               node.parent is not None, node.parent or 0,
                               node.chunk_id is not None, node.chunk_id or 0))
        _write_string(body, node.group_key)
        body.write(struct.pack("<I", len(node.children)))
        body.write(np.asarray(node.children, dtype="<u8").tobytes())
        if node.level == 0:
            path, (start, end) = node.span_refs[0]
            _write_string(body, path)
            body.write(struct.pack("<QQ", start, end))
        body.write(np.asarray(node.vector, dtype="<f4").tobytes())

    out = [MAGIC, struct.pack("<H", VERSION), _section(b"HEAD", head.getvalue()),
           _section(b"PARM", parm), _section(b"NODE", body.getvalue())]
    if index is not None:
        out.append(_section(b"INDX", _encode_arrays(index.to_arrays())))
    return b"".join(out)


def _read_section(r: _Reader, expected: bytes) -> bytes:
    tag = r.take(4)
    if tag != expected:
        raise CacheFormatError(f"expected section {expected!r}, found {tag!r}")
    (length,) = r.unpack("<Q")
    payload = r.take(length)
    (crc,) = r.unpack("<I")
    if zlib.crc32(tag + struct.pack("<Q", length) + payload) != crc:
        raise CacheChecksumError(f"CRC mismatch in section {expected.decode()}")
    return payload


def decode_cache(data: bytes, with_index: bool = True) -> RepoCache:
    """Inverse of :func:`encode_cache`; validates checksums and invariants."""
    r = _Reader(data, "cache file")
    if r.take(4) != MAGIC:
        raise CacheFormatError("not a cache file (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CacheFormatError(f"unsupported cache version {version}")
    head_raw = _read_section(r, b"HEAD")
    parm_raw = _read_section(r, b"PARM")
    node_raw = _read_section(r, b"NODE")
    index_arrays = None
    if not r.done():
        indx_raw = _read_section(r, b"INDX")
        if with_index:
            index_arrays = _decode_arrays(indx_raw, "INDX")
    if not r.done():
        raise CacheFormatError("trailing bytes after last section")

    try:
        h = _Reader(head_raw, "HEAD")
        repo_id = h.string()
        dim, b, d_f, heads, max_tokens = h.unpack("<IIIII")
        node_count, level_count, root_id, digest, has_params = h.unpack("<QIQQB")
        cfg_dim, cfg_seed, n_orders = h.unpack("<IQB")
        orders = h.unpack(f"<{n_orders}B")
        if not h.done():
            raise CacheFormatError("HEAD: trailing bytes")
        cfg = EmbedderConfig(dim=cfg_dim, ngram_orders=orders, seed=cfg_seed)

        params = None
        if has_params:
            arrays = _decode_arrays(parm_raw, "PARM")
            params = FuserParams(**{n: arrays[n] for n in PARAM_NAMES}, heads=heads)
            if params.d != dim or params.d_f != d_f:
                raise CacheInvariantError("fuser parameter shapes disagree with header")
        elif parm_raw:
            raise CacheFormatError("PARM section present for mean fuser")

        n = _Reader(node_raw, "NODE")
        nodes: Dict[int, HierarchyNode] = {}
        vbytes = 4 * dim
        for _ in range(node_count):
            nid, level, has_parent, parent, has_chunk, chunk_id = n.unpack("<QIBQBQ")
            key = n.string()
            (n_children,) = n.unpack("<I")
            children = tuple(int(c) for c in np.frombuffer(n.take(8 * n_children), dtype="<u8"))
            if level == 0:
                path = n.string()
                start, end = n.unpack("<QQ")
                spans: Tuple[SpanRef, ...] = ((path, (start, end)),)
            else:
                missing = [c for c in children if c not in nodes]
                if missing:
                    raise CacheInvariantError(f"node {nid} references unknown child {missing[0]}")
                spans = tuple(s for c in children for s in nodes[c].span_refs)
            vec = np.frombuffer(n.take(vbytes), dtype="<f4").astype(np.float32)
            if nid in nodes:
                raise CacheInvariantError(f"duplicate node id {nid}")
            nodes[nid] = HierarchyNode(nid, level, vec, parent if has_parent else None, children, spans, key,
                                       chunk_id if has_chunk else None)
        if not n.done():
            raise CacheFormatError("NODE: trailing bytes")
    except CacheFormatError:
        raise
    except (struct.error, ValueError, KeyError, HefError) as exc:
        raise CacheFormatError(f"malformed cache payload: {exc}") from exc

    meta = BuildMeta(b, dim, len(nodes), level_count, max_tokens, 0.0)
    cache = RepoCache(repo_id, nodes, root_id, cfg, digest, meta, params)
    validate(cache)
    if max(nd.level for nd in nodes.values()) + 1 != level_count:
        raise CacheInvariantError("level count disagrees with nodes")
    if index_arrays is not None:
        from .index import HnswIndex

        cache.index = HnswIndex.from_arrays(index_arrays)
    return cache


def save(cache: RepoCache, path: Union[str, Path], index=None) -> None:
    Path(path).write_bytes(encode_cache(cache, index if index is not None else cache.index))


def load(path: Union[str, Path], with_index: bool = True) -> RepoCache:
    return decode_cache(Path(path).read_bytes(), with_index=with_index)


# --------------------------------------------------------------------------
# helpers for contrastive training


def read_repo(root: Union[str, Path], suffixes: Sequence[str] = (".py",)) -> List[Tuple[str, str]]:
    """Load ``(relative posix path, text)`` for matching files under *root*."""
    root = Path(root)
    out = []
    for p in sorted(root.rglob("*")):
        if p.is_file() and (not suffixes or p.suffix in suffixes):
            out.append((p.relative_to(root).as_posix(), p.read_text(encoding="utf-8")))
    return out


def split_holdout(
    repo: Sequence[Tuple[str, str]],
    embedder_cfg: EmbedderConfig,
    holdout_fraction: float,
    seed: int,
    max_tokens: int = MAX_CHUNK_TOKENS,
) -> Tuple[List[Chunk], List[Chunk]]:
    """Split a repository's chunks into (kept, held-out) deterministically."""
    chunked = _chunk_repo(repo, "", max_tokens)
    flat = [c for p in sorted(chunked, key=_path_key) for c in chunked[p]]
    rng = np.random.default_rng(seed)
    mask = rng.random(len(flat)) < holdout_fraction
    if mask.all():
        mask[0] = False
    kept = [c for c, m in zip(flat, mask) if not m]
    held = [c for c, m in zip(flat, mask) if m]
    return kept, held


def cache_from_chunks(
    chunks: Sequence[Chunk], embedder_cfg: EmbedderConfig, fuser: Optional[Fuser] = None,
    b: int = DEFAULT_BRANCHING, repo_id: str = "repo",
) -> RepoCache:
    """Build a cache directly from pre-chunked content (no re-chunking)."""
    by_file: Dict[str, List[Chunk]] = {}
    for c in chunks:
        by_file.setdefault(c.file_path, []).append(c)
    if not by_file:
        raise EmptyRepoError("no chunks")
    fuser = fuser if fuser is not None else MeanFuser()
    t0 = time.perf_counter()
    files = _embed_files(by_file, embedder_cfg)
    nodes, root_id, stats = _assemble(files, fuser, b, {})
    meta = BuildMeta(b, embedder_cfg.dim, len(nodes), max(n.level for n in nodes.values()) + 1,
                     MAX_CHUNK_TOKENS, time.perf_counter() - t0)
    return RepoCache(repo_id, nodes, root_id, embedder_cfg, fuser.digest(), meta, _fuser_params_of(fuser), stats=stats)
