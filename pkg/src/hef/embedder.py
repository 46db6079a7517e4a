"""Deterministic signed feature-hashing embedder.

Stands in for a frozen neural encoder: token n-grams are hashed into ``dim``
buckets with a +/-1 sign and the accumulated counts are L2-normalized.
Accumulated values are small integers, so the result is bit-identical
whether a text is embedded alone or as part of a batch.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from .corpus import token_texts
from .errors import ConfigError, VectorImportError

NORM_TOL = 1e-5
MAX_DIM = 1 << 16

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class EmbedderConfig:
    dim: int = 256
    ngram_orders: Tuple[int, ...] = (1, 2, 3)
    seed: int = 0

    def __post_init__(self):
        d = self.dim
        if not (16 <= d <= MAX_DIM) or d & (d - 1):
            raise ConfigError(f"dim must be a power of two in [16, {MAX_DIM}], got {d}")
        orders = tuple(sorted(set(int(o) for o in self.ngram_orders)))
        if not orders or orders[0] < 1:
            raise ConfigError(f"ngram orders must be positive integers, got {self.ngram_orders}")
        object.__setattr__(self, "ngram_orders", orders)
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")


def _splitmix(z: np.ndarray) -> np.ndarray:
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@lru_cache(maxsize=1 << 18)
def _token_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def _features(token_lists: Sequence[Sequence[str]], cfg: EmbedderConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row ids, bucket indices and signs for every n-gram of every token list.

    N-grams never straddle two token lists.
    """
    lengths = np.fromiter((len(tl) for tl in token_lists), dtype=np.int64, count=len(token_lists))
    total = int(lengths.sum())
    empty = np.empty(0, np.int64)
    if total == 0:
        return empty, empty, np.empty(0, np.float64)
    t = np.fromiter((_token_hash(tok) for tl in token_lists for tok in tl), dtype=np.uint64, count=total)
    row = np.repeat(np.arange(len(token_lists), dtype=np.int64), lengths)
    mask = np.uint64(cfg.dim - 1)
    rows, buckets, signs = [], [], []
    with np.errstate(over="ignore"):
        for order in cfg.ngram_orders:
            count = total - order + 1
            if count <= 0:
                continue
            keep = row[:count] == row[order - 1:]
            h = _splitmix(np.full(count, np.uint64(cfg.seed) ^ np.uint64(order), dtype=np.uint64))
            for k in range(order):
                h = _splitmix(h ^ t[k:k + count])
            h = h[keep]
            rows.append(row[:count][keep])
            buckets.append((h & mask).astype(np.int64))
            signs.append(np.where(h >> np.uint64(63), -1.0, 1.0))
    if not rows:
        return empty, empty, np.empty(0, np.float64)
    return np.concatenate(rows), np.concatenate(buckets), np.concatenate(signs)


def _normalize_rows(acc: np.ndarray) -> np.ndarray:
    norms = np.sqrt((acc * acc).sum(axis=1))
    out = np.zeros_like(acc)
    nz = norms > 0
    out[nz] = acc[nz] / norms[nz, None]
    out[~nz, 0] = 1.0
    return out.astype(np.float32)


def _embed_token_lists(token_lists: Sequence[Sequence[str]], cfg: EmbedderConfig) -> np.ndarray:
    rows, idx, sgn = _features(token_lists, cfg)
    n = len(token_lists)
    acc = np.bincount(rows * cfg.dim + idx, weights=sgn, minlength=n * cfg.dim)
    return _normalize_rows(acc.reshape(n, cfg.dim))


def embed_tokens(tokens: Sequence[str], cfg: EmbedderConfig) -> np.ndarray:
    return _embed_token_lists([tokens], cfg)[0]


def embed(chunk_text: str, cfg: EmbedderConfig) -> np.ndarray:
    """Embed one text as a unit-norm float32 vector of length ``cfg.dim``.

    Texts with no n-grams (or whose hashed counts cancel exactly) map to the
    first standard basis vector.
    """
    return embed_tokens(token_texts(chunk_text), cfg)


def embed_many(texts: Iterable[str], cfg: EmbedderConfig, batch: int = 4096) -> np.ndarray:
    """Embed many texts; row ``i`` is bit-identical to ``embed(texts[i], cfg)``."""
    texts = list(texts)
    out = np.empty((len(texts), cfg.dim), dtype=np.float32)
    for lo in range(0, len(texts), batch):
        part = [token_texts(t) for t in texts[lo:lo + batch]]
        out[lo:lo + len(part)] = _embed_token_lists(part, cfg)
    return out


def check_unit(vec: np.ndarray, tol: float = NORM_TOL) -> bool:
    v = np.asarray(vec, dtype=np.float64)
    return bool(np.all(np.isfinite(v)) and abs(math.sqrt(float(v @ v)) - 1.0) <= tol)


def normalize(values: Sequence[float]) -> np.ndarray:
    """Parse to float32, then rescale to unit length (computed in float64)."""
    v = np.asarray(values, dtype=np.float32).astype(np.float64)
    n = math.sqrt(float(v @ v))
    if not np.all(np.isfinite(v)) or n == 0.0:
        raise ValueError("vector must be finite and non-zero")
    return (v / n).astype(np.float32)


def import_vectors(path: Union[str, Path], expected_dim: int) -> Dict[int, np.ndarray]:
    """Read ``{chunk_id, values}`` JSON lines, re-normalizing each vector.

    Raises :class:`VectorImportError` naming the line number for malformed
    records and the chunk id for dimension mismatches.
    """
    vectors: Dict[int, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                chunk_id = int(rec["chunk_id"])
                values = rec["values"]
                if not isinstance(values, list):
                    raise TypeError("values must be a list")
            except (ValueError, KeyError, TypeError) as exc:
                raise VectorImportError(f"line {lineno}: malformed record ({exc})") from exc
            if len(values) != expected_dim:
                raise VectorImportError(
                    f"line {lineno}: chunk_id {chunk_id} has dim {len(values)}, expected {expected_dim}"
                )
            try:
                vectors[chunk_id] = normalize(values)
            except (ValueError, TypeError) as exc:
                raise VectorImportError(f"line {lineno}: chunk_id {chunk_id}: {exc}") from exc
    return vectors


def export_vectors(vectors: Dict[int, np.ndarray], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for chunk_id, vec in vectors.items():
            values: List[float] = [float(x) for x in np.asarray(vec, dtype=np.float32)]
            fh.write(json.dumps({"chunk_id": int(chunk_id), "values": values}) + "\n")
