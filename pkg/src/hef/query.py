"""Online query path: prefix -> query vector -> top-K nodes -> pseudo-token block.

The block always has ``min(K, node_count)`` rows of width ``d_g`` no matter
how large the repository or the prefix is.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .cache import RepoCache, SpanRef
from .corpus import MAX_CHUNK_TOKENS, EntityList, extract_entities, tokenize
from .embedder import EmbedderConfig, embed
from .errors import ContractError
from .fuser import gelu, gelu_grad
from .index import HnswIndex, RetrievalHit

K_DEFAULT = 32
K_PRESETS = {"default": 32, "wide": 52}
QUERY_TOKENS = MAX_CHUNK_TOKENS
BLOCK_MAGIC = b"HEFB"


@dataclass
class ProjectorParams:
    w_1: np.ndarray
    b_1: np.ndarray
    w_2: np.ndarray
    b_2: np.ndarray

    @classmethod
    def init(cls, d: int, d_hidden: int = 128, d_g: int = 64, seed: int = 0) -> "ProjectorParams":
        rng = np.random.default_rng(seed)
        return cls(
            w_1=rng.standard_normal((d_hidden, d)) / np.sqrt(d),
            b_1=np.zeros(d_hidden),
            w_2=rng.standard_normal((d_g, d_hidden)) / np.sqrt(d_hidden),
            b_2=np.zeros(d_g),
        )

    @classmethod
    def zeros(cls, d: int, d_hidden: int = 128, d_g: int = 64) -> "ProjectorParams":
        return cls(np.zeros((d_hidden, d)), np.zeros(d_hidden), np.zeros((d_g, d_hidden)), np.zeros(d_g))

    @property
    def d(self) -> int:
        return self.w_1.shape[1]

    @property
    def d_hidden(self) -> int:
        return self.w_1.shape[0]

    @property
    def d_g(self) -> int:
        return self.w_2.shape[0]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"w_1": self.w_1, "b_1": self.b_1, "w_2": self.w_2, "b_2": self.b_2}

    def validate(self) -> None:
        h, d = self.w_1.shape
        if self.b_1.shape != (h,) or self.w_2.shape[1] != h or self.b_2.shape != (self.w_2.shape[0],):
            raise ContractError("projector parameter shapes are inconsistent")
        for name, a in self.arrays().items():
            if not np.all(np.isfinite(a)):
                raise ContractError(f"projector parameter {name} is not finite")

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, **self.arrays())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ProjectorParams":
        with np.load(path) as z:
            p = cls(*(np.asarray(z[k], dtype=np.float64) for k in ("w_1", "b_1", "w_2", "b_2")))
        p.validate()
        return p


@dataclass(frozen=True)
class Provenance:
    node_id: int
    level: int
    span_refs: Tuple[SpanRef, ...]
    score: float


@dataclass
class PseudoTokenBlock:
    tokens: np.ndarray
    provenance: List[Provenance]
    entity_suffix: Optional[EntityList] = None
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.tokens.shape[0]

    @property
    def total_seconds(self) -> float:
        return sum(self.timings.values())


def query_text(prefix: str, max_tokens: int = QUERY_TOKENS) -> str:
    """The suffix of *prefix* starting at its last ``max_tokens`` tokens."""
    toks = tokenize(prefix)
    if len(toks) <= max_tokens:
        return prefix
    start = toks[-max_tokens].byte_offset
    return prefix.encode("utf-8")[start:].decode("utf-8")


def form_query(prefix: str, embedder_cfg: EmbedderConfig) -> np.ndarray:
    return embed(query_text(prefix), embedder_cfg)


def _projector_forward(Z: np.ndarray, params: ProjectorParams) -> Tuple[np.ndarray, np.ndarray]:
    pre = Z @ params.w_1.T + params.b_1
    return gelu(pre) @ params.w_2.T + params.b_2, pre


def project_vectors(Z: np.ndarray, params: ProjectorParams) -> np.ndarray:
    """Row-wise MLP: ``W_2 gelu(W_1 z + b_1) + b_2``."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != params.d:
        raise ContractError(f"projector expects rows of width {params.d}, got shape {Z.shape}")
    return _projector_forward(Z, params)[0]


def _vectors_of(source, hits: Sequence[RetrievalHit]) -> np.ndarray:
    if isinstance(source, RepoCache):
        source = source.nodes
    rows = []
    for h in hits:
        v = source[h.node_id]
        rows.append(v.vector if hasattr(v, "vector") else v)
    return np.stack(rows).astype(np.float64) if rows else np.zeros((0, 0))


def project(hits: Sequence[RetrievalHit], vectors, params: ProjectorParams,
            span_refs: Optional[Mapping[int, Tuple[SpanRef, ...]]] = None) -> PseudoTokenBlock:
    """Project retrieved node vectors into pseudo-tokens, keeping retrieval order.

    ``vectors`` is a :class:`RepoCache` or a mapping from node id to vector
    (or to a node). Span provenance is taken from the cache when available.
    """
    params.validate()
    Z = _vectors_of(vectors, hits)
    if not hits:
        return PseudoTokenBlock(np.zeros((0, params.d_g), np.float32), [])
    tokens = project_vectors(Z, params).astype(np.float32)
    nodes = vectors.nodes if isinstance(vectors, RepoCache) else None
    prov = []
    for h in hits:
        if span_refs is not None:
            refs = span_refs.get(h.node_id, ())
        elif nodes is not None:
            refs = nodes[h.node_id].span_refs
        else:
            refs = ()
        prov.append(Provenance(h.node_id, h.level, tuple(refs), h.score))
    return PseudoTokenBlock(tokens, prov)


def _dedup(cache: RepoCache, hits: Sequence[RetrievalHit], k: int) -> List[RetrievalHit]:
    kept: List[RetrievalHit] = []
    blocked = set()
    for h in hits:
        if h.node_id in blocked:
            continue
        up = cache.ancestors(h.node_id)
        if any(a in {g.node_id for g in kept} for a in up):
            continue
        kept.append(h)
        blocked.update(up)
        if len(kept) == k:
            break
    return kept


def retrieve(q: np.ndarray, cache: RepoCache, index: HnswIndex, K: int = K_DEFAULT,
             ef_search: Optional[int] = None, dedup: bool = False) -> List[RetrievalHit]:
    """Top-K hits; with ``dedup`` a node is skipped when an ancestor or
    descendant of it already ranked higher."""
    if not dedup:
        return index.search(q, K, ef_search)
    n = len(index)
    want = min(K, n)
    fetch = want
    while True:
        fetch = min(n, fetch * 4)
        hits = _dedup(cache, index.search(q, fetch, max(ef_search or 0, fetch)), want)
        if len(hits) == want or fetch == n:
            return hits


def _entities_for(hit: RetrievalHit, cache: RepoCache, sources: Mapping[str, str]) -> EntityList:
    paths = []
    for path, _ in cache.nodes[hit.node_id].span_refs:
        if path not in paths:
            paths.append(path)
    text = "\n".join(sources[p] for p in paths if p in sources)
    return extract_entities(text)


def complete_context(
    prefix: str,
    cache: RepoCache,
    index: HnswIndex,
    projector: ProjectorParams,
    K: int = K_DEFAULT,
    with_entities: bool = False,
    sources: Optional[Mapping[str, str]] = None,
    ef_search: Optional[int] = None,
    dedup: bool = False,
) -> PseudoTokenBlock:
    """Run the whole online path and time each stage.

    ``timings`` holds ``embed``, ``search`` and ``project`` seconds; entity
    extraction (when requested, from ``sources``) is counted in ``project``.
    """
    if with_entities and sources is None:
        raise ContractError("with_entities needs the repository sources")
    t0 = time.perf_counter()
    q = form_query(prefix, cache.embedder_cfg)
    t1 = time.perf_counter()
    hits = retrieve(q, cache, index, K, ef_search, dedup)
    t2 = time.perf_counter()
    block = project(hits, cache, projector)
    if with_entities and hits:
        block.entity_suffix = _entities_for(hits[0], cache, sources)
    t3 = time.perf_counter()
    block.timings = {"embed": t1 - t0, "search": t2 - t1, "project": t3 - t2}
    return block


def projector_gradient(Z: np.ndarray, G: np.ndarray, params: ProjectorParams) -> Dict[str, np.ndarray]:
    """Gradients of ``sum(G * project_vectors(Z))`` with respect to each parameter.

    ``G`` is the downstream gradient for every pseudo-token row.
    """
    Z = np.asarray(Z, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != params.d:
        raise ContractError(f"Z must have shape (m, {params.d})")
    if G.shape != (Z.shape[0], params.d_g):
        raise ContractError(f"G must have shape ({Z.shape[0]}, {params.d_g})")
    pre = Z @ params.w_1.T + params.b_1
    hid = gelu(pre)
    g_hid = G @ params.w_2
    g_pre = g_hid * gelu_grad(pre)
    return {
        "w_1": g_pre.T @ Z,
        "b_1": g_pre.sum(axis=0),
        "w_2": G.T @ hid,
        "b_2": G.sum(axis=0),
    }


# --------------------------------------------------------------------------
# block export


def block_sidecar(block: PseudoTokenBlock) -> dict:
    return {
        "m": block.m,
        "d_g": int(block.tokens.shape[1]),
        "provenance": [
            {
                "node_id": p.node_id,
                "level": p.level,
                "score": p.score,
                "span_refs": [[path, list(span)] for path, span in p.span_refs],
            }
            for p in block.provenance
        ],
        "entity_suffix": list(block.entity_suffix.names) if block.entity_suffix else None,
        "timings_ms": {k: v * 1e3 for k, v in block.timings.items()},
    }


def write_block(block: PseudoTokenBlock, path: Union[str, Path]) -> Tuple[Path, Path]:
    """Write ``<path>.bin`` (magic, u32 m, u32 d_g, float32 rows) and ``<path>.json``."""
    path = Path(path)
    bin_path = path.with_name(path.name + ".bin")
    json_path = path.with_name(path.name + ".json")
    tokens = np.ascontiguousarray(block.tokens, dtype="<f4")
    with open(bin_path, "wb") as fh:
        fh.write(BLOCK_MAGIC + struct.pack("<II", *tokens.shape) + tokens.tobytes())
    json_path.write_text(json.dumps(block_sidecar(block), indent=2) + "\n", encoding="utf-8")
    return bin_path, json_path


def read_block_tokens(bin_path: Union[str, Path]) -> np.ndarray:
    data = Path(bin_path).read_bytes()
    if data[:4] != BLOCK_MAGIC:
        raise ContractError("not a pseudo-token block file")
    m, d_g = struct.unpack_from("<II", data, 4)
    return np.frombuffer(data, dtype="<f4", count=m * d_g, offset=12).reshape(m, d_g).copy()
