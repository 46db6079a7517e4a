"""HNSW approximate nearest-neighbour index over unit vectors, plus an exact oracle.

Similarity is the dot product of unit vectors (cosine). The graph routines
are compiled with numba and work on internal row indices, assigned in
ascending node-id order so ties inside the graph also favour lower ids.

Graph navigation uses a fast float32 distance. Final results are always
re-scored with :func:`exact_scores`, the float64 kernel the brute-force
oracle uses, so an exhaustive search (``ef_search >= node count``)
returns exactly the oracle's answer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numba
import numpy as np

from .embedder import NORM_TOL
from .errors import ConfigError, ContractError

_MAX_LEVEL = 16


@dataclass(frozen=True)
class HnswConfig:
    M: int = 16
    ef_construction: int = 200
    ef_search: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.M < 2:
            raise ConfigError("M must be >= 2")
        if self.ef_construction < 1 or self.ef_search < 1:
            raise ConfigError("ef values must be positive")


@dataclass(frozen=True)
class RetrievalHit:
    node_id: int
    score: float
    level: int


# --------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True, fastmath=True)
def _dist(vecs, i, q):
    # graph navigation only; final ranking uses _exact_scores
    s = np.float32(0.0)
    for k in range(vecs.shape[1]):
        s += vecs[i, k] * q[k]
    return 1.0 - np.float64(s)


@numba.njit(cache=True, fastmath=True)
def _dist_rows(vecs, i, j):
    s = np.float32(0.0)
    for k in range(vecs.shape[1]):
        s += vecs[i, k] * vecs[j, k]
    return 1.0 - np.float64(s)


@numba.njit(cache=True)
def _exact_scores(vecs, rows, q):
    out = np.empty(rows.shape[0], dtype=np.float64)
    for t in range(rows.shape[0]):
        i = rows[t]
        s = 0.0
        for k in range(vecs.shape[1]):
            s += np.float64(vecs[i, k]) * np.float64(q[k])
        out[t] = s
    return out


@numba.njit(cache=True)
def _lt(da, ia, db, ib):
    return da < db or (da == db and ia < ib)


@numba.njit(cache=True)
def _min_push(hd, hi, size, d, i):
    pos = size
    hd[pos] = d
    hi[pos] = i
    while pos > 0:
        parent = (pos - 1) >> 1
        if _lt(hd[pos], hi[pos], hd[parent], hi[parent]):
            hd[pos], hd[parent] = hd[parent], hd[pos]
            hi[pos], hi[parent] = hi[parent], hi[pos]
            pos = parent
        else:
            break
    return size + 1


@numba.njit(cache=True)
def _min_pop(hd, hi, size):
    size -= 1
    hd[0] = hd[size]
    hi[0] = hi[size]
    pos = 0
    while True:
        left = 2 * pos + 1
        if left >= size:
            break
        best = left
        right = left + 1
        if right < size and _lt(hd[right], hi[right], hd[left], hi[left]):
            best = right
        if _lt(hd[best], hi[best], hd[pos], hi[pos]):
            hd[pos], hd[best] = hd[best], hd[pos]
            hi[pos], hi[best] = hi[best], hi[pos]
            pos = best
        else:
            break
    return size


@numba.njit(cache=True)
def _max_push(hd, hi, size, d, i):
    pos = size
    hd[pos] = d
    hi[pos] = i
    while pos > 0:
        parent = (pos - 1) >> 1
        if _lt(hd[parent], hi[parent], hd[pos], hi[pos]):
            hd[pos], hd[parent] = hd[parent], hd[pos]
            hi[pos], hi[parent] = hi[parent], hi[pos]
            pos = parent
        else:
            break
    return size + 1


@numba.njit(cache=True)
def _max_pop(hd, hi, size):
    size -= 1
    hd[0] = hd[size]
    hi[0] = hi[size]
    pos = 0
    while True:
        left = 2 * pos + 1
        if left >= size:
            break
        best = left
        right = left + 1
        if right < size and _lt(hd[left], hi[left], hd[right], hi[right]):
            best = right
        if _lt(hd[pos], hi[pos], hd[best], hi[best]):
            hd[pos], hd[best] = hd[best], hd[pos]
            hi[pos], hi[best] = hi[best], hi[pos]
            pos = best
        else:
            break
    return size


@numba.njit(cache=True)
def _search_layer(vecs, q, entries, ef, layer, nbr0, cnt0, slot, nbrU, cntU, extra_ptr, extra_idx, visited, gen):
    """Best-first search on one layer. Returns (dists, rows) sorted ascending."""
    n = vecs.shape[0]
    cap = 4 * ef + entries.shape[0] + 64
    cd = np.empty(cap, np.float64)
    ci = np.empty(cap, np.int64)
    rd = np.empty(min(ef, n) + 2, np.float64)
    ri = np.empty(min(ef, n) + 2, np.int64)
    csize = 0
    rsize = 0
    for t in range(entries.shape[0]):
        e = entries[t]
        if visited[e] == gen:
            continue
        visited[e] = gen
        d = _dist(vecs, e, q)
        csize = _min_push(cd, ci, csize, d, e)
        rsize = _max_push(rd, ri, rsize, d, e)
        if rsize > ef:
            rsize = _max_pop(rd, ri, rsize)
    while csize > 0:
        c_d = cd[0]
        c_i = ci[0]
        csize = _min_pop(cd, ci, csize)
        if _lt(rd[0], ri[0], c_d, c_i):
            break
        if layer == 0:
            count = cnt0[c_i]
        else:
            count = cntU[slot[c_i], layer - 1]
        n_extra = 0
        if layer == 0:
            n_extra = extra_ptr[c_i + 1] - extra_ptr[c_i]
        for t in range(count + n_extra):
            if t < count:
                if layer == 0:
                    e = nbr0[c_i, t]
                else:
                    e = nbrU[slot[c_i], layer - 1, t]
            else:
                e = extra_idx[extra_ptr[c_i] + t - count]
            if visited[e] == gen:
                continue
            visited[e] = gen
            d = _dist(vecs, e, q)
            if rsize < ef or _lt(d, e, rd[0], ri[0]):
                if csize == cd.shape[0]:
                    cd2 = np.empty(2 * csize, np.float64)
                    ci2 = np.empty(2 * csize, np.int64)
                    cd2[:csize] = cd
                    ci2[:csize] = ci
                    cd = cd2
                    ci = ci2
                csize = _min_push(cd, ci, csize, d, e)
                rsize = _max_push(rd, ri, rsize, d, e)
                if rsize > ef:
                    rsize = _max_pop(rd, ri, rsize)
    out_d = np.empty(rsize, np.float64)
    out_i = np.empty(rsize, np.int64)
    for t in range(rsize - 1, -1, -1):
        out_d[t] = rd[0]
        out_i[t] = ri[0]
        rsize = _max_pop(rd, ri, rsize)
    return out_d, out_i


@numba.njit(cache=True)
def _select(vecs, cand_d, cand_i, m):
    """Diversity heuristic: keep a candidate only if it is closer to the base
    point than to every neighbour already kept."""
    chosen = np.empty(m, np.int64)
    k = 0
    for t in range(cand_i.shape[0]):
        e = cand_i[t]
        good = True
        for s in range(k):
            if _dist_rows(vecs, e, chosen[s]) < cand_d[t]:
                good = False
                break
        if good:
            chosen[k] = e
            k += 1
            if k == m:
                break
    return chosen[:k]


@numba.njit(cache=True)
def _link(vecs, src, dst, layer, m_cap, nbr0, cnt0, slot, nbrU, cntU):
    """Add edge src->dst on a layer, pruning src's list back to m_cap."""
    if layer == 0:
        count = cnt0[src]
    else:
        count = cntU[slot[src], layer - 1]
    for t in range(count):
        existing = nbr0[src, t] if layer == 0 else nbrU[slot[src], layer - 1, t]
        if existing == dst:
            return
    if count < m_cap:
        if layer == 0:
            nbr0[src, count] = dst
            cnt0[src] = count + 1
        else:
            nbrU[slot[src], layer - 1, count] = dst
            cntU[slot[src], layer - 1] = count + 1
        return
    cand_d = np.empty(count + 1, np.float64)
    cand_i = np.empty(count + 1, np.int64)
    for t in range(count):
        e = nbr0[src, t] if layer == 0 else nbrU[slot[src], layer - 1, t]
        cand_i[t] = e
        cand_d[t] = _dist_rows(vecs, src, e)
    cand_i[count] = dst
    cand_d[count] = _dist_rows(vecs, src, dst)
    # sort by (dist, row)
    order = np.argsort(cand_i, kind="mergesort")
    cand_d = cand_d[order]
    cand_i = cand_i[order]
    order = np.argsort(cand_d, kind="mergesort")
    cand_d = cand_d[order]
    cand_i = cand_i[order]
    kept = _select(vecs, cand_d, cand_i, m_cap)
    for t in range(kept.shape[0]):
        if layer == 0:
            nbr0[src, t] = kept[t]
        else:
            nbrU[slot[src], layer - 1, t] = kept[t]
    if layer == 0:
        cnt0[src] = kept.shape[0]
    else:
        cntU[slot[src], layer - 1] = kept.shape[0]


@numba.njit(cache=True)
def _build(vecs, levels, slot, m, ef_c, nbr0, cnt0, nbrU, cntU, extra_ptr, extra_idx):
    n = vecs.shape[0]
    visited = np.zeros(n, np.int64)
    gen = 0
    entry = 0
    max_level = levels[0]
    one = np.empty(1, np.int64)
    for i in range(1, n):
        q = vecs[i]
        lvl = levels[i]
        ep = entry
        for lc in range(max_level, lvl, -1):
            gen += 1
            one[0] = ep
            _, ids = _search_layer(vecs, q, one, 1, lc, nbr0, cnt0, slot, nbrU, cntU, extra_ptr, extra_idx, visited, gen)
            ep = ids[0]
        eps = np.empty(1, np.int64)
        eps[0] = ep
        for lc in range(min(lvl, max_level), -1, -1):
            gen += 1
            w_d, w_i = _search_layer(vecs, q, eps, ef_c, lc, nbr0, cnt0, slot, nbrU, cntU, extra_ptr, extra_idx, visited, gen)
            m_cap = 2 * m if lc == 0 else m
            chosen = _select(vecs, w_d, w_i, m)
            for t in range(chosen.shape[0]):
                _link(vecs, i, chosen[t], lc, m_cap, nbr0, cnt0, slot, nbrU, cntU)
                _link(vecs, chosen[t], i, lc, m_cap, nbr0, cnt0, slot, nbrU, cntU)
            eps = w_i
        if lvl > max_level:
            max_level = lvl
            entry = i
    return entry, max_level


@numba.njit(cache=True)
def _reach(start, reached, nbr0, cnt0, extra_ptr, extra_idx):
    stack = [start]
    reached[start] = True
    while len(stack) > 0:
        c = stack.pop()
        for t in range(cnt0[c]):
            e = nbr0[c, t]
            if not reached[e]:
                reached[e] = True
                stack.append(e)
        for t in range(extra_ptr[c], extra_ptr[c + 1]):
            e = extra_idx[t]
            if not reached[e]:
                reached[e] = True
                stack.append(e)


def exact_scores(vectors: np.ndarray, q: np.ndarray, rows: Optional[np.ndarray] = None) -> np.ndarray:
    """Dot products in float64 with a fixed summation order per row."""
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    if rows is None:
        rows = np.arange(vectors.shape[0], dtype=np.int64)
    return _exact_scores(vectors, np.asarray(rows, dtype=np.int64), np.asarray(q, dtype=np.float32))


def _check_unit_rows(vectors: np.ndarray) -> None:
    v = vectors.astype(np.float64)
    if not np.all(np.isfinite(v)):
        raise ContractError("index vectors must be finite")
    dev = np.abs(np.sqrt((v * v).sum(axis=1)) - 1.0)
    if dev.size and dev.max() > NORM_TOL:
        raise ContractError(f"index vectors must be unit-norm (max deviation {dev.max():.3g})")


def _rank(scores: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    order = np.lexsort((ids, -scores))
    return order[:k]


class HnswIndex:
    """Layered proximity graph with deterministic construction."""

    def __init__(self, vectors, node_ids, levels, cfg, graph_levels, slot, nbr0, cnt0, nbrU, cntU,
                 extra_ptr, extra_idx, entry, max_level):
        self.vectors = vectors
        self.node_ids = node_ids
        self.levels = levels
        self.cfg = cfg
        self.graph_levels = graph_levels
        self.slot = slot
        self.nbr0 = nbr0
        self.cnt0 = cnt0
        self.nbrU = nbrU
        self.cntU = cntU
        self.extra_ptr = extra_ptr
        self.extra_idx = extra_idx
        self.entry = int(entry)
        self.max_level = int(max_level)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @classmethod
    def build(cls, vectors, node_ids=None, levels=None, cfg: HnswConfig = HnswConfig()) -> "HnswIndex":
        vectors = np.asarray(vectors, dtype=np.float32)
        n = vectors.shape[0]
        if n == 0:
            raise ContractError("cannot index zero vectors")
        _check_unit_rows(vectors)
        node_ids = np.arange(n, dtype=np.uint64) if node_ids is None else np.asarray(node_ids, dtype=np.uint64)
        levels = np.zeros(n, np.int64) if levels is None else np.asarray(levels, dtype=np.int64)
        if len(np.unique(node_ids)) != n:
            raise ContractError("node ids must be unique")
        order = np.argsort(node_ids, kind="stable")
        vectors = np.ascontiguousarray(vectors[order])
        node_ids = node_ids[order]
        levels = levels[order]

        rng = np.random.default_rng(cfg.seed)
        ml = 1.0 / math.log(cfg.M)
        u = 1.0 - rng.random(n)  # (0, 1]
        graph_levels = np.minimum(np.floor(-np.log(u) * ml), _MAX_LEVEL).astype(np.int64)
        upper = np.flatnonzero(graph_levels > 0)
        slot = np.full(n, -1, np.int64)
        slot[upper] = np.arange(len(upper))
        top = max(1, int(graph_levels.max()))
        nbr0 = np.full((n, 2 * cfg.M), -1, np.int64)
        cnt0 = np.zeros(n, np.int64)
        nbrU = np.full((max(1, len(upper)), top, cfg.M), -1, np.int64)
        cntU = np.zeros((max(1, len(upper)), top), np.int64)
        extra_ptr = np.zeros(n + 1, np.int64)
        extra_idx = np.zeros(0, np.int64)
        entry, max_level = _build(vectors, graph_levels, slot, cfg.M, cfg.ef_construction,
                                  nbr0, cnt0, nbrU, cntU, extra_ptr, extra_idx)
        extra_ptr, extra_idx = cls._repair(vectors, entry, nbr0, cnt0)
        return cls(vectors, node_ids, levels, cfg, graph_levels, slot, nbr0, cnt0, nbrU, cntU,
                   extra_ptr, extra_idx, entry, max_level)

    @staticmethod
    def _repair(vectors, entry, nbr0, cnt0):
        """Add extra layer-0 edges so every row is reachable from the entry point."""
        n = vectors.shape[0]
        extra_ptr = np.zeros(n + 1, np.int64)
        extra_idx = np.zeros(0, np.int64)
        reached = np.zeros(n, np.bool_)
        _reach(entry, reached, nbr0, cnt0, extra_ptr, extra_idx)
        edges: Dict[int, List[int]] = {}
        while not reached.all():
            u = int(np.flatnonzero(~reached)[0])
            src_rows = np.flatnonzero(reached)
            scores = _exact_scores(vectors, src_rows, vectors[u])
            v = int(src_rows[_rank(scores, src_rows, 1)[0]])
            edges.setdefault(v, []).append(u)
            _reach(u, reached, nbr0, cnt0, extra_ptr, extra_idx)
        if edges:
            counts = np.zeros(n, np.int64)
            for v, us in edges.items():
                counts[v] = len(us)
            extra_ptr[1:] = np.cumsum(counts)
            extra_idx = np.zeros(int(counts.sum()), np.int64)
            for v, us in edges.items():
                extra_idx[extra_ptr[v]:extra_ptr[v] + len(us)] = us
        return extra_ptr, extra_idx

    @property
    def repair_edges(self) -> int:
        return int(self.extra_idx.shape[0])

    def _hits(self, rows: np.ndarray, scores: np.ndarray, k: int) -> List[RetrievalHit]:
        ids = self.node_ids[rows]
        top = _rank(scores, ids, k)
        return [RetrievalHit(int(ids[t]), float(scores[t]), int(self.levels[rows[t]])) for t in top]

    def search(self, q, k: int = 32, ef_search: Optional[int] = None) -> List[RetrievalHit]:
        """Top-``k`` nodes by cosine, sorted by (score desc, node_id asc)."""
        if k < 1:
            raise ContractError("K must be >= 1")
        q = np.asarray(q, dtype=np.float32)
        if q.shape != (self.vectors.shape[1],):
            raise ContractError(f"query has shape {q.shape}, index dim is {self.vectors.shape[1]}")
        n = len(self)
        k = min(k, n)
        ef = ef_search if ef_search is not None else self.cfg.ef_search
        ef = min(max(ef, k), n)
        visited = np.zeros(n, np.int64)
        gen = 0
        ep = self.entry
        one = np.empty(1, np.int64)
        for lc in range(self.max_level, 0, -1):
            gen += 1
            one[0] = ep
            _, ids = _search_layer(self.vectors, q, one, 1, lc, self.nbr0, self.cnt0, self.slot, self.nbrU,
                                   self.cntU, self.extra_ptr, self.extra_idx, visited, gen)
            ep = ids[0]
        entries = np.array([ep, self.entry] if ep != self.entry else [ep], dtype=np.int64)
        gen += 1
        _, rows = _search_layer(self.vectors, q, entries, ef, 0, self.nbr0, self.cnt0, self.slot, self.nbrU,
                                self.cntU, self.extra_ptr, self.extra_idx, visited, gen)
        scores = _exact_scores(self.vectors, rows, q)
        return self._hits(rows, scores, k)

    def brute_force(self, q, k: int = 32) -> List[RetrievalHit]:
        q = np.asarray(q, dtype=np.float32)
        rows = np.arange(len(self), dtype=np.int64)
        return self._hits(rows, _exact_scores(self.vectors, rows, q), min(k, len(self)))

    def to_arrays(self):
        cfg = self.cfg
        return [
            ("vectors", self.vectors), ("node_ids", self.node_ids), ("levels", self.levels),
            ("config", np.array([cfg.M, cfg.ef_construction, cfg.ef_search, cfg.seed], np.int64)),
            ("graph_levels", self.graph_levels), ("slot", self.slot), ("nbr0", self.nbr0),
            ("cnt0", self.cnt0), ("nbrU", self.nbrU), ("cntU", self.cntU),
            ("extra_ptr", self.extra_ptr), ("extra_idx", self.extra_idx),
            ("entry", np.array([self.entry, self.max_level], np.int64)),
        ]

    @classmethod
    def from_arrays(cls, a) -> "HnswIndex":
        c = a["config"]
        cfg = HnswConfig(int(c[0]), int(c[1]), int(c[2]), int(c[3]))
        return cls(np.ascontiguousarray(a["vectors"]), a["node_ids"], a["levels"], cfg, a["graph_levels"],
                   a["slot"], a["nbr0"], a["cnt0"], a["nbrU"], a["cntU"], a["extra_ptr"], a["extra_idx"],
                   int(a["entry"][0]), int(a["entry"][1]))


def build_index(cache, cfg: HnswConfig = HnswConfig()) -> HnswIndex:
    """Index every node of a :class:`~hef.cache.RepoCache` (all levels)."""
    index = HnswIndex.build(cache.matrix(), cache.node_ids, cache.levels(), cfg)
    cache.index = index
    return index


def ensure_index(cache, cfg: HnswConfig = HnswConfig()) -> HnswIndex:
    """Return the cache's stored index if it matches the cache, else rebuild it."""
    idx = cache.index
    if idx is not None and len(idx) == len(cache.nodes) and np.array_equal(np.sort(cache.node_ids), idx.node_ids):
        return idx
    return build_index(cache, cfg)


def search(index: HnswIndex, q, K: int = 32, ef_search: Optional[int] = None) -> List[RetrievalHit]:
    return index.search(q, K, ef_search)


def brute_force(vectors, q, K: int = 32, node_ids=None, levels=None) -> List[RetrievalHit]:
    """Exact top-K by cosine with the (score desc, node_id asc) tie rule."""
    vectors = np.asarray(vectors, dtype=np.float32)
    n = vectors.shape[0]
    if K < 1:
        raise ContractError("K must be >= 1")
    node_ids = np.arange(n, dtype=np.uint64) if node_ids is None else np.asarray(node_ids, dtype=np.uint64)
    levels = np.zeros(n, np.int64) if levels is None else np.asarray(levels, dtype=np.int64)
    rows = np.arange(n, dtype=np.int64)
    scores = _exact_scores(np.ascontiguousarray(vectors), rows, np.asarray(q, dtype=np.float32))
    top = _rank(scores, node_ids, min(K, n))
    return [RetrievalHit(int(node_ids[t]), float(scores[t]), int(levels[t])) for t in top]


def recall_at_k(approx: Sequence[RetrievalHit], exact: Sequence[RetrievalHit]) -> float:
    truth = {h.node_id for h in exact}
    if not truth:
        return 1.0
    return len(truth & {h.node_id for h in approx}) / len(truth)
