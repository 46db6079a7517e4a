import io
import json
import tokenize as pytokenize

import pytest
from hypothesis import given, strategies as st

from hef.corpus import (
    Chunk,
    TokenKind,
    chunk_file,
    chunk_id_for,
    extract_entities,
    read_chunks_jsonl,
    token_texts,
    tokenize,
    write_chunks_jsonl,
)
from hef.errors import CorpusError

from conftest import small_function


def test_empty_source_has_no_tokens():
    assert tokenize("") == []


def test_hand_traced_token_stream():
    toks = tokenize("def f(x):\n    return x")
    assert [(t.kind, t.text) for t in toks] == [
        (TokenKind.KEYWORD, "def"),
        (TokenKind.IDENTIFIER, "f"),
        (TokenKind.PUNCTUATION, "("),
        (TokenKind.IDENTIFIER, "x"),
        (TokenKind.PUNCTUATION, ")"),
        (TokenKind.PUNCTUATION, ":"),
        (TokenKind.NEWLINE, "\n"),
        (TokenKind.INDENT, "    "),
        (TokenKind.KEYWORD, "return"),
        (TokenKind.IDENTIFIER, "x"),
    ]
    assert [t.byte_offset for t in toks] == [0, 4, 5, 6, 7, 8, 9, 10, 14, 21]


def test_dedent_is_zero_width_at_next_statement():
    toks = tokenize("if a:\n    b\nc\n")
    kinds = [t.kind for t in toks]
    i = kinds.index(TokenKind.DEDENT)
    assert toks[i].text == "" and toks[i].byte_offset == toks[i + 1].byte_offset


def test_byte_offsets_count_utf8_bytes():
    toks = tokenize("s = 'é'\nt = 1\n")
    t = next(t for t in toks if t.text == "t")
    assert t.byte_offset == len("s = 'é'\n".encode("utf-8"))


def test_invalid_utf8_rejected():
    with pytest.raises(CorpusError):
        tokenize(b"x = '\xff'\n")


def _reference_line_count(line: str) -> int:
    """Tokens of one simple statement via the stdlib tokenizer (no indent handling)."""
    wanted = {pytokenize.NAME, pytokenize.OP, pytokenize.NUMBER, pytokenize.STRING, pytokenize.COMMENT}
    stream = pytokenize.generate_tokens(io.StringIO(line.strip() + "\n").readline)
    return sum(1 for tok in stream if tok.type in wanted) + 1  # + newline


def test_large_generated_file_matches_per_line_oracle():
    templates = [
        "x{i} = y{i} + {i}",
        "call_{i}(a, b[{i}], 'lit{i}')",
        "z{i} **= 2  # note {i}",
        "w = {{'k': {i}, 'v': [1, 2]}}",
        "if q{i} > {i}:",
    ]
    lines, expected, depth = [], 0, 0
    for i in range(10_000):
        stmt = templates[i % len(templates)].format(i=i)
        # depth only increases right after an "if" line
        new_depth = depth + 1 if i and lines[-1].rstrip().endswith(":") else (0 if depth and i % 7 == 0 else depth)
        if stmt.endswith(":") and i == 9_999:
            stmt = "pass"
        if new_depth > depth:
            expected += 1
        elif new_depth < depth:
            expected += depth - new_depth
        depth = new_depth
        lines.append("    " * depth + stmt + "\n")
        expected += _reference_line_count(stmt)
    toks = tokenize("".join(lines))
    assert len(toks) == expected


def test_three_functions_give_three_chunks_at_boundaries():
    src = "\n".join(small_function(n, 8) for n in ("alpha", "beta", "gamma"))
    chunks = chunk_file("m.py", src)
    assert len(chunks) == 3
    assert [c.text.split("(")[0] for c in chunks] == ["def alpha", "def beta", "def gamma"]


def test_long_function_hard_cut():
    src = "def f(a):\n" + "    x = y\n" * 323
    assert len(tokenize(src)) == 1300
    assert [c.token_count for c in chunk_file("f.py", src)] == [512, 512, 276]


def test_empty_file_has_no_chunks():
    assert chunk_file("e.py", "") == []
    assert chunk_file("e.py", "\n\n  \n") == []


def test_blank_line_split_preferred_over_hard_cut():
    block = "".join(f"    x{i} = {i}\n" for i in range(40))
    src = "def f():\n" + block + "\n" + block + "\n" + block
    chunks = chunk_file("f.py", src, max_tokens=200)
    assert all(c.token_count <= 200 for c in chunks)
    # every cut lands on a line start, never mid-line
    for c in chunks[1:]:
        assert src.encode()[c.byte_span[0] - 1:c.byte_span[0]] in (b"\n", b" ")


def test_chunk_ids_are_stable_and_scoped():
    a = chunk_id_for("r", "a.py", (0, 10))
    assert a == chunk_id_for("r", "a.py", (0, 10))
    assert a != chunk_id_for("r", "b.py", (0, 10))
    assert a != chunk_id_for("s", "a.py", (0, 10))
    assert 0 <= a < 2**64


def test_chunks_jsonl_round_trip(tmp_path):
    src = "\n".join(small_function(n) for n in ("a", "b"))
    chunks = chunk_file("pkg/x.py", src, repo_id="r")
    path = tmp_path / "c.jsonl"
    assert write_chunks_jsonl(chunks, path) == 2
    rec = json.loads(path.read_text().splitlines()[0])
    assert set(rec) == {"chunk_id", "file_path", "byte_span", "token_count", "text"}
    assert read_chunks_jsonl(path) == chunks


def test_entities_hand_traced():
    ents = extract_entities("class A:\n  def m(self): pass")
    assert ents.names == ("A", "A.m")
    assert ents.token_budget_used == 4  # A | A . m


def test_entities_nested_and_async_scopes():
    src = "class A:\n    def m(self):\n        def inner(): pass\n    async def n(self): pass\ndef top(): pass\n"
    assert extract_entities(src).names == ("A", "A.m", "A.m.inner", "A.n", "top")


def test_no_definitions_no_entities():
    e = extract_entities("x = 1\nprint(x)\n")
    assert e.names == () and e.token_budget_used == 0


def test_entity_budget_truncates():
    src = "".join(f"def fn_{i}(): pass\n" for i in range(200))
    e = extract_entities(src)
    assert e.token_budget_used <= 64
    assert e.token_budget_used == sum(len(token_texts(n)) for n in e.names)
    assert len(e.names) == 64  # one token per simple name


def test_malformed_definition_is_skipped():
    e = extract_entities("def (:\n    pass\nclass Ok:\n    pass\n")
    assert e.names == ("Ok",)


# ---------------------------------------------------------------- properties

_line = st.from_regex(r"[a-z_]{1,6}( [=+*/-] [a-z0-9_]{1,6}){0,4}", fullmatch=True)


@st.composite
def python_like(draw):
    out = []
    depth = 0
    for _ in range(draw(st.integers(0, 60))):
        choice = draw(st.integers(0, 5))
        if choice == 0:
            out.append("    " * depth + f"def {draw(_line).split()[0]}(a):")
            depth += 1
            out.append("    " * depth + draw(_line))
        elif choice == 1 and depth:
            depth = draw(st.integers(0, depth - 1))
            out.append("    " * depth + draw(_line))
        elif choice == 2:
            out.append("")
        else:
            out.append("    " * depth + draw(_line))
    return "\n".join(out) + ("\n" if draw(st.booleans()) else "")


@given(python_like(), st.integers(1, 64))
def test_chunks_cover_all_tokens_without_overlap(src, max_tokens):
    chunks = chunk_file("p.py", src, max_tokens)
    spans = [c.byte_span for c in chunks]
    assert spans == sorted(spans)
    assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
    assert all(1 <= c.token_count <= max_tokens for c in chunks)
    assert sum(c.token_count for c in chunks) == len(tokenize(src))
    for t in tokenize(src):
        assert any(s <= t.byte_offset and t.byte_end <= e for s, e in spans)
    assert chunk_file("p.py", src, max_tokens) == chunks


@given(python_like())
def test_token_offsets_increase_and_text_matches(src):
    data = src.encode()
    toks = tokenize(src)
    offsets = [t.byte_offset for t in toks if t.text]
    assert offsets == sorted(offsets) and len(set(offsets)) == len(offsets)
    for t in toks:
        if t.kind != TokenKind.DEDENT:
            assert data[t.byte_offset:t.byte_end].decode() == t.text
    # non-token bytes are whitespace only
    covered = bytearray(len(data))
    for t in toks:
        covered[t.byte_offset:t.byte_end] = b"\x01" * (t.byte_end - t.byte_offset)
    assert all(c or chr(b).isspace() for c, b in zip(covered, data))


@given(python_like(), st.integers(0, 80))
def test_entity_budget_property(src, budget):
    e = extract_entities(src, budget)
    assert e.token_budget_used <= budget
    assert len(set(e.names)) == len(e.names)
