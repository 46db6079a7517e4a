"""Seeded generator of small Python-like repositories.

Each repository draws identifiers from its own private pool and from a
pool shared by all repositories. ``disjointness`` is the probability of
drawing from the private pool, so 1.0 means no identifier is shared.
Every generated function is short enough to be exactly one chunk.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Set, Union

import numpy as np

from .corpus import KEYWORDS

_ONSETS = ["b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z",
           "br", "ch", "dr", "gl", "kr", "pl", "sh", "st", "th", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ea"]
_POOL_SIZE = 48


@dataclass(frozen=True)
class SyntheticSpec:
    repos: int = 4
    files_per_repo: int = 8
    chunks_per_file: int = 4
    disjointness: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.repos < 1 or self.files_per_repo < 1 or self.chunks_per_file < 1:
            raise ValueError("repos, files_per_repo and chunks_per_file must be positive")
        if not 0.0 <= self.disjointness <= 1.0:
            raise ValueError("disjointness must lie in [0, 1]")


def _word(rng: np.random.Generator) -> str:
    n = int(rng.integers(2, 4))
    return "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(n))


def _pools(spec: SyntheticSpec, rng: np.random.Generator):
    used: Set[str] = set(KEYWORDS)

    def pool() -> List[str]:
        out = []
        while len(out) < _POOL_SIZE:
            w = _word(rng)
            if w not in used:
                used.add(w)
                out.append(w)
        return out

    shared = pool()
    private = [pool() for _ in range(spec.repos)]
    return shared, private


class _Writer:
    def __init__(self, rng: np.random.Generator, private: List[str], shared: List[str], disjointness: float):
        self.rng = rng
        self.private = private
        self.shared = shared
        self.p = disjointness

    def name(self) -> str:
        pool = self.private if self.rng.random() < self.p else self.shared
        return pool[self.rng.integers(len(pool))]

    def num(self) -> str:
        return str(int(self.rng.integers(0, 100)))

    def statement(self, args: List[str], local: List[str]) -> str:
        r = self.rng
        a = args[r.integers(len(args))]
        kind = int(r.integers(5))
        v = self.name()
        local.append(v)
        if kind == 0:
            return f"    {v} = {a} + {self.num()}\n"
        if kind == 1:
            return f"    {v} = {self.name()}({a}, {local[r.integers(len(local))]})\n"
        if kind == 2:
            return f"    {v} = [{a} * {self.num()} for {self.name()} in {self.name()}]\n"
        if kind == 3:
            return f"    if {a} > {self.num()}:\n        {v} = {self.name()}.{self.name()}({a})\n    else:\n        {v} = {a}\n"
        return f"    {v} = {{'{self.name()}': {a}, '{self.name()}': {self.num()}}}\n"

    def function(self) -> str:
        fname = self.name()
        args = [self.name() for _ in range(int(self.rng.integers(1, 4)))]
        local: List[str] = list(args)
        body = "".join(self.statement(args, local) for _ in range(int(self.rng.integers(2, 6))))
        return f"def {fname}({', '.join(args)}):\n{body}    return {local[-1]}\n"


def _file_path(j: int) -> str:
    # a shallow package layout: a few subpackages plus top-level modules
    if j % 4 == 3:
        return f"mod_{j:03d}.py"
    return f"pkg_{j % 3}/mod_{j:03d}.py"


def synthetic_repos(spec: SyntheticSpec) -> List[Dict[str, str]]:
    """Generate every repository in memory as ``{relative path: source}``."""
    rng = np.random.default_rng(spec.seed)
    shared, private = _pools(spec, rng)
    repos = []
    for r in range(spec.repos):
        w = _Writer(np.random.default_rng([spec.seed, r]), private[r], shared, spec.disjointness)
        files = {}
        for j in range(spec.files_per_repo):
            files[_file_path(j)] = "\n\n".join(w.function() for _ in range(spec.chunks_per_file))
        repos.append(files)
    return repos


def repo_name(i: int) -> str:
    return f"repo_{i:03d}"


def generate_synthetic(spec: SyntheticSpec, out_dir: Union[str, Path]) -> List[Path]:
    """Write the repositories under *out_dir*; returns one root per repository."""
    out_dir = Path(out_dir)
    roots = []
    for i, files in enumerate(synthetic_repos(spec)):
        root = out_dir / repo_name(i)
        for rel, text in files.items():
            p = root / rel
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_bytes(text.encode("utf-8"))
        roots.append(root)
    return roots
