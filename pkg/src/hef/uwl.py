"""Utility-weighted likelihood filtering of (prefix, context, completion) triples.

A frozen add-k smoothed n-gram model plays the reference model. For a
triple ``(x, c, y)`` the gain ``delta = log p(y | c, x) - log p(y | x)``
(natural log) is squashed with a logistic function; triples scoring
below the threshold are dropped from the training set.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .corpus import token_texts
from .errors import ConfigError, CorpusError, HefError

BOS = "<s>"
UNK = "<unk>"
DEFAULT_THRESHOLD = 0.55

Tokens = Sequence[str]


class ReportError(HefError, OSError):
    """Writing the score report failed; the message names the record index."""


@dataclass(frozen=True)
class NgramLm:
    order: int
    add_k: float
    vocab: frozenset
    counts: Dict[Tuple[str, ...], Dict[str, int]]
    totals: Dict[Tuple[str, ...], int]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def _word(self, tok: str) -> str:
        return tok if tok in self.vocab else UNK

    def prob(self, token: str, history: Tokens) -> float:
        """p(token | last order-1 items of history) with add-k smoothing."""
        ctx = tuple(history[len(history) - (self.order - 1):]) if self.order > 1 else ()
        w = self._word(token)
        seen = self.counts.get(ctx)
        c = seen.get(w, 0) if seen else 0
        return (c + self.add_k) / (self.totals.get(ctx, 0) + self.add_k * self.vocab_size)


def _as_tokens(seq: Union[str, Tokens]) -> List[str]:
    return token_texts(seq) if isinstance(seq, str) else list(seq)


def fit_lm(corpus: Iterable[Union[str, Tokens]], order: int = 3, add_k: float = 0.5,
           extra_vocab: Iterable[str] = ()) -> NgramLm:
    """Count n-grams over sequences (each padded with ``order - 1`` BOS marks).

    Strings in *corpus* are tokenized; the vocabulary is every token seen
    plus ``extra_vocab`` plus an unknown-word bucket.
    """
    if order < 1:
        raise ConfigError("order must be >= 1")
    if add_k <= 0:
        raise ConfigError("add_k must be positive")
    seqs = [_as_tokens(s) for s in corpus]
    if not any(seqs):
        raise CorpusError("cannot fit a language model on an empty corpus")
    vocab = {UNK, *extra_vocab}
    for s in seqs:
        vocab.update(s)
    counts: Dict[Tuple[str, ...], Counter] = defaultdict(Counter)
    pad = [BOS] * (order - 1)
    for s in seqs:
        padded = pad + s
        for i in range(order - 1, len(padded)):
            counts[tuple(padded[i - order + 1:i])][padded[i]] += 1
    frozen = {ctx: dict(c) for ctx, c in counts.items()}
    totals = {ctx: sum(c.values()) for ctx, c in frozen.items()}
    return NgramLm(order, float(add_k), frozenset(vocab), frozen, totals)


def log_likelihood(lm: NgramLm, target: Union[str, Tokens], conditioning: Union[str, Tokens] = ()) -> float:
    """Sum of ``log p(y_i | window)`` where the window runs over conditioning then y."""
    y = _as_tokens(target)
    history = [BOS] * (lm.order - 1) + _as_tokens(conditioning)
    total = 0.0
    for tok in y:
        total += math.log(lm.prob(tok, history))
        history.append(tok)
    return total


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class UwlRecord:
    prefix_id: str
    chunk_id: str
    completion_id: str
    delta: float
    uwl: float
    kept: bool

    def to_json(self) -> dict:
        return {"prefix_id": self.prefix_id, "chunk_id": self.chunk_id, "completion_id": self.completion_id,
                "delta": self.delta, "uwl": self.uwl, "kept": self.kept}


@dataclass(frozen=True)
class UwlPair:
    x: Union[str, Tokens]
    c: Union[str, Tokens]
    y: Union[str, Tokens]
    prefix_id: str = ""
    chunk_id: str = ""
    completion_id: str = ""


def conditioned(x: Tokens, c: Tokens, context_first: bool = True) -> List[str]:
    return list(c) + list(x) if context_first else list(x) + list(c)


def uwl_score(lm: NgramLm, x, c, y, threshold: float = DEFAULT_THRESHOLD, context_first: bool = True,
              ids: Tuple[str, str, str] = ("", "", "")) -> UwlRecord:
    """Score one triple. With an empty context the two likelihoods are the
    same computation, so ``delta`` is exactly zero."""
    xt, ct, yt = _as_tokens(x), _as_tokens(c), _as_tokens(y)
    with_c = log_likelihood(lm, yt, conditioned(xt, ct, context_first))
    without = log_likelihood(lm, yt, xt)
    delta = with_c - without
    u = sigmoid(delta)
    return UwlRecord(ids[0], ids[1], ids[2], delta, u, u >= threshold)


def filter_pairs(
    pairs: Sequence[UwlPair],
    lm: NgramLm,
    threshold: float = DEFAULT_THRESHOLD,
    report: Optional[Union[str, Path]] = None,
    context_first: bool = True,
) -> Tuple[List[UwlPair], List[UwlRecord]]:
    """Keep the pairs whose score reaches *threshold*, in input order.

    Every record is written to *report* (JSON lines) when a path is given.
    """
    records = [
        uwl_score(lm, p.x, p.c, p.y, threshold, context_first, (p.prefix_id, p.chunk_id, p.completion_id))
        for p in pairs
    ]
    if report is not None:
        _write_report(records, report)
    kept = [p for p, r in zip(pairs, records) if r.kept]
    return kept, records


def _write_report(records: Sequence[UwlRecord], path: Union[str, Path]) -> None:
    i = -1
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for i, rec in enumerate(records):
                fh.write(json.dumps(rec.to_json()) + "\n")
    except OSError as exc:
        raise ReportError(f"writing report record {max(i, 0)} to {path}: {exc}") from exc


def read_pairs(path: Union[str, Path]) -> List[UwlPair]:
    """Load ``{x, c, y, prefix_id?, chunk_id?, completion_id?}`` JSON lines."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pairs.append(UwlPair(rec["x"], rec["c"], rec["y"], str(rec.get("prefix_id", lineno)),
                                     str(rec.get("chunk_id", "")), str(rec.get("completion_id", ""))))
            except (ValueError, KeyError) as exc:
                raise CorpusError(f"line {lineno}: malformed pair ({exc})") from exc
    return pairs
