"""Glue between repositories on disk/in memory and contrastive fuser training."""

from __future__ import annotations

from typing import List, Mapping, Sequence, Tuple, Union

import numpy as np

from .cache import DEFAULT_BRANCHING, cache_from_chunks, split_holdout, tree_plan
from .embedder import EmbedderConfig, embed_many
from .fuser import ContrastiveCorpus, Fuser, FuserParams, MeanFuser, forest_roots

Repo = Union[Mapping[str, str], Sequence[Tuple[str, str]]]


def contrastive_corpus(
    repos: Sequence[Repo],
    embedder_cfg: EmbedderConfig,
    b: int = DEFAULT_BRANCHING,
    holdout_fraction: float = 0.2,
    seed: int = 0,
) -> ContrastiveCorpus:
    """One tree per repository built from its non-held-out chunks.

    Training queries are the tree's own leaf vectors; validation queries
    are embeddings of the held-out chunks, which no tree contains.
    """
    trees, train_q, val_q = [], [], []
    for i, repo in enumerate(repos):
        items = list(repo.items()) if isinstance(repo, Mapping) else list(repo)
        kept, held = split_holdout(items, embedder_cfg, holdout_fraction, seed=seed + i)
        cache = cache_from_chunks(kept, embedder_cfg, MeanFuser(), b, repo_id=f"repo{i}")
        plan = tree_plan(cache)
        trees.append(plan)
        train_q.append(list(plan.leaves))
        held_vecs = embed_many([c.text for c in held], embedder_cfg).astype(np.float64)
        val_q.append(list(held_vecs))
    return ContrastiveCorpus(trees, train_q, val_q)


def roots_for(corpus: ContrastiveCorpus, fuser: Union[Fuser, FuserParams]) -> np.ndarray:
    if isinstance(fuser, FuserParams):
        return forest_roots(fuser, corpus.trees)
    return np.stack([t.root_with(fuser) for t in corpus.trees]).astype(np.float64)


def root_top1(corpus: ContrastiveCorpus, fuser: Union[Fuser, FuserParams]) -> float:
    """Fraction of held-out chunks whose best-scoring root is their own repository's."""
    R = roots_for(corpus, fuser)
    batch = corpus.validation_batch()
    if len(batch.queries) == 0:
        return float("nan")
    scores = batch.queries @ R.T
    return float(np.mean(np.argmax(scores, axis=1) == batch.owners))


def validation_counts(corpus: ContrastiveCorpus) -> List[int]:
    return [len(v) for v in corpus.val_queries]
