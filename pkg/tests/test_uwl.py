import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from hef.errors import ConfigError, CorpusError
from hef.uwl import (
    BOS,
    UNK,
    ReportError,
    UwlPair,
    filter_pairs,
    fit_lm,
    log_likelihood,
    read_pairs,
    sigmoid,
    uwl_score,
)


def test_bigram_hand_count():
    k = 0.5
    lm = fit_lm([["a", "b", "a", "b"]], order=2, add_k=k)
    V = lm.vocab_size
    assert V == 3  # a, b and the unknown bucket
    assert lm.prob("b", ["a"]) == pytest.approx((2 + k) / (2 + k * V), abs=1e-15)


def test_string_corpus_is_tokenized():
    assert fit_lm(["a b a b"], order=2) == fit_lm([["a", "b", "a", "b"]], order=2)


def test_unseen_context_is_uniform():
    lm = fit_lm([["a", "b", "c"]], order=3)
    for tok in ("a", "b", "zzz"):
        assert lm.prob(tok, ["c", "c"]) == pytest.approx(1 / lm.vocab_size, abs=1e-15)
    assert log_likelihood(lm, ["a"], ["c", "c"]) == pytest.approx(math.log(1 / lm.vocab_size), abs=1e-12)


def test_unknown_words_share_one_bucket():
    lm = fit_lm([["a", "b"]], order=1)
    assert lm.prob("never", []) == lm.prob("seen", []) == lm.prob(UNK, [])


def test_six_token_hand_trace():
    lm = fit_lm([["a", "b", "c", "a", "b", "d"]], order=2, add_k=0.5)
    # vocab {a, b, c, d, <unk>}; context counts: <s>->a:1, a->b:2, b->c:1 d:1, c->a:1
    want = math.log(1.5 / 3.5) + math.log(2.5 / 4.5) + math.log(1.5 / 4.5)
    assert log_likelihood(lm, ["a", "b", "d"]) == pytest.approx(want, abs=1e-12)


def test_empty_target_has_zero_likelihood():
    lm = fit_lm([["a"]], order=2)
    assert log_likelihood(lm, [], ["a"]) == 0.0


def test_refit_is_identical():
    corpus = ["def f(x): return x", "f(1) + f(2)"]
    assert fit_lm(corpus) == fit_lm(corpus)


def test_fit_errors():
    with pytest.raises(CorpusError):
        fit_lm([])
    with pytest.raises(CorpusError):
        fit_lm([[], ""])
    with pytest.raises(ConfigError):
        fit_lm(["a"], order=0)
    with pytest.raises(ConfigError):
        fit_lm(["a"], add_k=0)


@settings(max_examples=40)
@given(st.lists(st.lists(st.sampled_from("abcde"), max_size=12), min_size=1, max_size=6).filter(any),
       st.integers(1, 4), st.floats(0.01, 2.0), st.lists(st.sampled_from("abcdex"), max_size=4))
def test_conditionals_sum_to_one(corpus, order, k, history):
    lm = fit_lm(corpus, order=order, add_k=k)
    h = [BOS] * (order - 1) + history
    assert sum(lm.prob(w, h) for w in lm.vocab) == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------------- scoring

CORPUS = [["x", "s", "t"]] * 2 + [["q", "r", "x", "s", "t"]] * 5 + [["m", "x", "k", "l"]] * 5


@pytest.fixture(scope="module")
def lm():
    return fit_lm(CORPUS, order=3)


def test_empty_context_gives_zero_delta(lm):
    rec = uwl_score(lm, ["x"], [], ["s", "t"])
    assert rec.delta == 0.0 and rec.uwl == 0.5 and not rec.kept


def test_helpful_context_raises_delta(lm):
    rec = uwl_score(lm, ["x"], ["q", "r"], ["s", "t"])
    assert rec.delta > 0
    # only the first target token sees the context: p(s|r,x) against p(s|<s>,x)
    V = lm.vocab_size
    want = math.log((5 + 0.5) / (5 + 0.5 * V)) - math.log((2 + 0.5) / (2 + 0.5 * V))
    assert rec.delta == pytest.approx(want, abs=1e-12)


def test_misleading_context_is_filtered(lm):
    rec = uwl_score(lm, ["x"], ["m"], ["s", "t"])
    assert rec.delta < 0 and not rec.kept


def test_context_order_is_configurable(lm):
    # with x first, the context sits next to y and decides the window
    first = uwl_score(lm, ["x"], ["q", "r"], ["s"], context_first=True)
    last = uwl_score(lm, ["x"], ["q", "r"], ["s"], context_first=False)
    assert first.delta != last.delta


@given(st.floats(-700, 700))
def test_uwl_is_logistic_of_delta(d):
    assert sigmoid(d) == pytest.approx(1 / (1 + math.exp(-d)), abs=1e-12)
    assert 0.0 <= sigmoid(d) <= 1.0


@given(st.floats(-20, 20), st.floats(1e-3, 5))
def test_sigmoid_is_monotone(d, gap):
    assert sigmoid(d + gap) > sigmoid(d)


def mixed_pairs():
    xs = [["x"], ["m"], ["q"], []]
    cs = [[], ["q", "r"], ["m"], ["s", "t"], ["k"]]
    ys = [["s", "t"], ["k", "l"], ["x"]]
    out = []
    for i, x in enumerate(xs):
        for j, c in enumerate(cs):
            for h, y in enumerate(ys):
                out.append(UwlPair(x, c, y, f"p{i}", f"c{j}", f"y{h}"))
    return out


def test_filter_matches_rescan(lm, tmp_path):
    pairs = mixed_pairs()
    kept, records = filter_pairs(pairs, lm, report=tmp_path / "r.jsonl")
    rescan = []
    for p in pairs:
        seq_with = log_likelihood(lm, p.y, list(p.c) + list(p.x))
        seq_without = log_likelihood(lm, p.y, p.x)
        if 1 / (1 + math.exp(-(seq_with - seq_without))) >= 0.55:
            rescan.append(p)
    assert kept == rescan
    assert 0 < len(kept) < len(pairs)
    lines = [json.loads(l) for l in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert len(lines) == len(pairs)
    assert [l["kept"] for l in lines] == [r.kept for r in records]
    assert all(l["kept"] == (l["uwl"] >= 0.55) for l in lines)


def test_zero_delta_dataset_keeps_nothing(lm):
    pairs = [UwlPair(["x"], [], ["s"]), UwlPair([], [], ["k", "l"])]
    assert filter_pairs(pairs, lm)[0] == []


def test_threshold_zero_keeps_everything(lm):
    pairs = mixed_pairs()
    assert filter_pairs(pairs, lm, threshold=0.0)[0] == pairs


def test_filter_is_idempotent(lm):
    kept, _ = filter_pairs(mixed_pairs(), lm)
    assert filter_pairs(kept, lm)[0] == kept


def test_report_error_names_record(lm, tmp_path):
    with pytest.raises(ReportError, match="record 0"):
        filter_pairs(mixed_pairs()[:2], lm, report=tmp_path)


def test_read_pairs(tmp_path):
    path = tmp_path / "pairs.jsonl"
    path.write_text('{"x": "a b", "c": "c", "y": "d", "chunk_id": 7}\n\n{"x": "", "c": "", "y": "e"}\n')
    pairs = read_pairs(path)
    assert [(p.x, p.c, p.y, p.prefix_id, p.chunk_id) for p in pairs] == [
        ("a b", "c", "d", "1", "7"), ("", "", "e", "3", "")]
    path.write_text('{"x": "a"}\n')
    with pytest.raises(CorpusError, match="line 1"):
        read_pairs(path)
