"""Offline-cost and query-latency benchmark over synthetic repositories."""

from __future__ import annotations

import csv
import json
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .cache import build_cache
from .embedder import EmbedderConfig
from .index import HnswConfig, brute_force, build_index, recall_at_k
from .query import ProjectorParams, complete_context, form_query
from .synthetic import SyntheticSpec, synthetic_repos

SCHEMA_VERSION = 1
STAGES = ("embed", "search", "project")


@dataclass
class BenchConfig:
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    dim: int = 256
    branching: int = 8
    K: int = 32
    queries: int = 200
    ef_search: int = 128
    ef_construction: int = 200
    M: int = 16
    workers: int = 1
    d_hidden: int = 128
    d_g: int = 64
    seed: int = 0


@dataclass
class BenchReport:
    schema_version: int
    corpus: Dict[str, int]
    offline_seconds: List[float]
    node_counts: List[int]
    latencies_ms: List[float]
    median_ms: float
    p90_ms: float
    p99_ms: float
    stage_median_ms: Dict[str, float]
    recall: float
    workers: int
    hardware: Dict[str, str]
    config: Dict[str, object]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        return cls(**json.loads(text))

    def deterministic_view(self) -> dict:
        """Fields that must match across runs with the same seed."""
        return {"corpus": self.corpus, "node_counts": self.node_counts, "recall": self.recall}


def percentiles(latencies_ms: Sequence[float]) -> Dict[str, float]:
    """Median, p90 and p99 with numpy's linear interpolation."""
    a = np.asarray(latencies_ms, dtype=np.float64)
    p50, p90, p99 = np.percentile(a, [50, 90, 99])
    return {"median_ms": float(p50), "p90_ms": float(p90), "p99_ms": float(p99)}


def hardware_info() -> Dict[str, str]:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "system": f"{platform.system()} {platform.release()}",
        "cpu_count": str(os.cpu_count()),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def _sample_prefixes(repos, n: int, seed: int):
    """Prefixes are file heads cut at a random line, drawn across repositories."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        r = int(rng.integers(len(repos)))
        paths = sorted(repos[r])
        text = repos[r][paths[int(rng.integers(len(paths)))]]
        lines = text.splitlines(keepends=True)
        cut = int(rng.integers(1, len(lines) + 1))
        out.append((r, "".join(lines[:cut])))
    return out


@dataclass
class BuiltCorpus:
    """Synthetic repositories with their caches and indexes, plus build wall-clock per repo."""

    repos: List[Dict[str, str]]
    caches: list
    indexes: list
    offline_seconds: List[float]


def build_corpus(cfg: BenchConfig, progress=None) -> BuiltCorpus:
    repos = synthetic_repos(cfg.synthetic)
    ecfg = EmbedderConfig(dim=cfg.dim, seed=cfg.seed)
    hcfg = HnswConfig(M=cfg.M, ef_construction=cfg.ef_construction, ef_search=cfg.ef_search, seed=cfg.seed)
    caches, indexes, offline = [], [], []
    for i, files in enumerate(repos):
        t0 = time.perf_counter()
        cache = build_cache(files, ecfg, b=cfg.branching, repo_id=f"repo_{i:03d}")
        index = build_index(cache, hcfg)
        offline.append(time.perf_counter() - t0)
        caches.append(cache)
        indexes.append(index)
        if progress:
            progress(f"built repo {i}: {len(cache.nodes)} nodes in {offline[-1]:.2f}s")
    return BuiltCorpus(repos, caches, indexes, offline)


WARMUP_QUERIES = 3


def measure_queries(cfg: BenchConfig, built: BuiltCorpus) -> BenchReport:
    """Time ``cfg.queries`` end-to-end queries against an already built corpus."""
    ecfg = EmbedderConfig(dim=cfg.dim, seed=cfg.seed)
    projector = ProjectorParams.init(cfg.dim, cfg.d_hidden, cfg.d_g, seed=cfg.seed)
    repos, caches, indexes = built.repos, built.caches, built.indexes
    prefixes = _sample_prefixes(repos, cfg.queries, cfg.seed)

    def one(item):
        r, prefix = item
        t0 = time.perf_counter()
        block = complete_context(prefix, caches[r], indexes[r], projector, cfg.K, ef_search=cfg.ef_search)
        total = time.perf_counter() - t0
        return total, block

    # first calls pay for loading compiled kernels; keep that out of the numbers
    for item in prefixes[:WARMUP_QUERIES]:
        one(item)
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(one, prefixes))
    else:
        results = [one(p) for p in prefixes]

    recalls = []
    for (r, prefix), (_, block) in zip(prefixes, results):
        q = form_query(prefix, ecfg)
        idx = indexes[r]
        exact = brute_force(idx.vectors, q, cfg.K, idx.node_ids, idx.levels)
        recalls.append(recall_at_k([_Hit(p.node_id) for p in block.provenance], exact))

    lat = sorted(t * 1e3 for t, _ in results)
    stage = {s: float(np.median([b.timings[s] * 1e3 for _, b in results])) for s in STAGES}
    counts = [len(c.nodes) for c in caches]
    return BenchReport(
        schema_version=SCHEMA_VERSION,
        corpus={"repos": len(repos), "files": sum(len(f) for f in repos),
                "chunks": sum(len(c.leaves()) for c in caches), "dim": cfg.dim, "nodes": sum(counts)},
        offline_seconds=list(built.offline_seconds),
        node_counts=counts,
        latencies_ms=lat,
        **percentiles(lat),
        stage_median_ms=stage,
        recall=float(np.mean(recalls)),
        workers=cfg.workers,
        hardware=hardware_info(),
        config=_flat_config(cfg),
    )


def run_bench(cfg: BenchConfig, progress=None) -> BenchReport:
    return measure_queries(cfg, build_corpus(cfg, progress))


@dataclass(frozen=True)
class _Hit:
    node_id: int


def _flat_config(cfg: BenchConfig) -> Dict[str, object]:
    d = asdict(cfg)
    d["synthetic"] = asdict(cfg.synthetic)
    return d


def write_report(report: BenchReport, path: Union[str, Path], fmt: str = "json") -> Path:
    """JSON holds the whole report; CSV holds one row per query latency plus a summary header."""
    path = Path(path)
    if fmt == "json":
        path.write_text(report.to_json() + "\n", encoding="utf-8")
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["# schema_version", report.schema_version])
            for key in ("median_ms", "p90_ms", "p99_ms", "recall"):
                w.writerow([f"# {key}", repr(getattr(report, key))])
            w.writerow(["rank", "latency_ms"])
            for i, v in enumerate(report.latencies_ms):
                w.writerow([i, repr(v)])
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return path


def read_csv_latencies(path: Union[str, Path]) -> List[float]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row and not row[0].startswith("#") and row[0] != "rank":
                out.append(float(row[1]))
    return out
