"""Tokenization, chunking and entity extraction for source files.

The tokenizer is a small indentation-aware lexer in the spirit of Python's
``tokenize`` module, but it never fails: anything it does not recognise
becomes a one-character punctuation token. Chunking uses the resulting
logical-line structure to find split points.
"""

from __future__ import annotations

import enum
import hashlib
import json
import keyword
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple, Union

from .errors import CorpusError

MAX_CHUNK_TOKENS = 512
ENTITY_TOKEN_BUDGET = 64


class TokenKind(str, enum.Enum):
    IDENTIFIER = "identifier"
    KEYWORD = "keyword"
    LITERAL = "literal"
    PUNCTUATION = "punctuation"
    NEWLINE = "newline"
    INDENT = "indent"
    DEDENT = "dedent"
    COMMENT = "comment"


STRUCTURAL_KINDS = frozenset({TokenKind.NEWLINE, TokenKind.INDENT, TokenKind.DEDENT})

KEYWORDS = frozenset(keyword.kwlist) | frozenset(keyword.softkwlist) - {"_"}


@dataclass(frozen=True)
class Token:
    text: str
    kind: TokenKind
    byte_offset: int

    @property
    def byte_end(self) -> int:
        return self.byte_offset + len(self.text.encode("utf-8"))


@dataclass(frozen=True)
class Chunk:
    chunk_id: int
    file_path: str
    byte_span: Tuple[int, int]
    token_count: int
    text: str

    def to_record(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "file_path": self.file_path,
            "byte_span": list(self.byte_span),
            "token_count": self.token_count,
            "text": self.text,
        }


@dataclass(frozen=True)
class EntityList:
    names: Tuple[str, ...]
    token_budget_used: int


_OPERATORS = sorted(
    [
        "**=", "//=", ">>=", "<<=", "...", "!==", "===",
        "->", ":=", "==", "!=", "<=", ">=", "**", "//", "<<", ">>",
        "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "@=", "&&", "||",
        "::", "=>", "++", "--",
    ],
    key=len,
    reverse=True,
)

_MASTER = re.compile(
    r"""
    (?P<ws>[ \t\f\r]+)
  | (?P<newline>\n)
  | (?P<cont>\\\r?\n)
  | (?P<comment>\#[^\n]*)
  | (?P<tstring>(?:[rRbBuUfF]{1,2})?(?:\"\"\"(?:\\.|[^\\])*?(?:\"\"\"|\Z)|'''(?:\\.|[^\\])*?(?:'''|\Z)))
  | (?P<string>(?:[rRbBuUfF]{1,2})?(?:"(?:\\.|[^"\\\n])*(?:"|(?=\n)|\Z)|'(?:\\.|[^'\\\n])*(?:'|(?=\n)|\Z)))
  | (?P<number>0[xXoObB][0-9a-fA-F_]+|(?:\d[\d_]*(?:\.[\d_]*)?|\.\d[\d_]*)(?:[eE][+-]?\d+)?[jJlL]?)
  | (?P<name>[^\W\d]\w*)
  | (?P<op>"""
    + "|".join(re.escape(op) for op in _OPERATORS)
    + r""")
  | (?P<other>.)
    """,
    re.VERBOSE | re.DOTALL,
)
_LEADING_WS = re.compile(r"[ \t\f\r]*")
_RECOVER = re.compile(r"(?:async[ \t]+)?(?:def|class)\b|@")
_OPEN = "([{"
_CLOSE = ")]}"


def _indent_width(ws: str) -> int:
    col = 0
    for ch in ws:
        if ch == "\t":
            col = (col // 8 + 1) * 8
        elif ch == "\r":
            continue
        else:
            col += 1
    return col


def _scan(source: str) -> Iterator[Tuple[TokenKind, str, int]]:
    """Yield ``(kind, text, char_offset)`` for every token of *source*."""
    pos = 0
    n = len(source)
    depth = 0
    at_line_start = True
    indents = [0]
    match = _MASTER.match
    while pos < n:
        if at_line_start and depth == 0:
            ws_end = _LEADING_WS.match(source, pos).end()
            if ws_end >= n:
                return
            ch = source[ws_end]
            if ch == "\n":
                pos = ws_end + 1
                continue
            if ch == "#" or source.startswith("\\\n", ws_end):
                # comment-only and continuation lines do not change indentation
                pos = ws_end
                at_line_start = False
                continue
            col = _indent_width(source[pos:ws_end])
            if col > indents[-1]:
                indents.append(col)
                yield TokenKind.INDENT, source[pos:ws_end], pos
            elif col < indents[-1]:
                while col < indents[-1]:
                    indents.pop()
                    yield TokenKind.DEDENT, "", ws_end
                if col > indents[-1]:
                    indents.append(col)
            pos = ws_end
            at_line_start = False
            continue

        m = match(source, pos)
        group = m.lastgroup
        text = m.group()
        start = pos
        pos = m.end()
        if group == "ws" or group == "cont":
            continue
        if group == "newline":
            if depth and _RECOVER.match(source, pos):
                # an unclosed bracket does not swallow the next top-level definition
                depth = 0
            if depth == 0:
                at_line_start = True
                yield TokenKind.NEWLINE, text, start
            continue
        if group == "comment":
            yield TokenKind.COMMENT, text, start
        elif group in ("tstring", "string", "number"):
            yield TokenKind.LITERAL, text, start
        elif group == "name":
            kind = TokenKind.KEYWORD if text in KEYWORDS else TokenKind.IDENTIFIER
            yield kind, text, start
        else:
            if text in _OPEN:
                depth += 1
            elif text in _CLOSE:
                depth = max(0, depth - 1)
            yield TokenKind.PUNCTUATION, text, start


class _ByteMapper:
    """Converts increasing character offsets to UTF-8 byte offsets."""

    def __init__(self, source: str):
        self.source = source
        self.ascii = source.isascii()
        self._char = 0
        self._byte = 0

    def __call__(self, char_offset: int) -> int:
        if self.ascii:
            return char_offset
        if char_offset < self._char:
            self._char = 0
            self._byte = 0
        self._byte += len(self.source[self._char:char_offset].encode("utf-8"))
        self._char = char_offset
        return self._byte


def _as_text(source: Union[str, bytes]) -> str:
    if isinstance(source, (bytes, bytearray)):
        try:
            return bytes(source).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorpusError(f"source is not valid UTF-8: {exc}") from exc
    return source


def tokenize(source: Union[str, bytes]) -> List[Token]:
    """Tokenize *source* into a deterministic token stream.

    Indentation increases emit an ``indent`` token carrying the leading
    whitespace; decreases emit zero-width ``dedent`` tokens positioned at the
    first token of the dedented line. Newlines inside brackets and blank lines
    are skipped whitespace. Bytes input must be valid UTF-8.
    """
    text = _as_text(source)
    to_byte = _ByteMapper(text)
    return [Token(tok, kind, to_byte(off)) for kind, tok, off in _scan(text)]


def token_texts(source: str, include_structural: bool = False) -> List[str]:
    """Token strings of *source*, without indent/dedent/newline by default."""
    if include_structural:
        return [tok for _, tok, _ in _scan(source)]
    return [tok for kind, tok, _ in _scan(source) if kind not in STRUCTURAL_KINDS]


def chunk_id_for(repo_id: str, file_path: str, byte_span: Tuple[int, int]) -> int:
    payload = "\x00".join([repo_id, file_path]).encode("utf-8") + struct.pack(
        "<QQ", byte_span[0], byte_span[1]
    )
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


# boundary priorities for logical-line starts
_HARD = 0
_BLANK = 1
_NESTED_DEF = 2
_TOP_DEF = 3


def _line_boundaries(source: str, toks: Sequence[Tuple[TokenKind, str, int]]) -> List[Tuple[int, int]]:
    """Return ``(token_index, priority)`` for every logical-line start."""
    out = []
    depth = 0
    prev_decorator = False
    n = len(toks)
    i = 0
    while i < n:
        j = i
        while j < n and toks[j][0] in (TokenKind.INDENT, TokenKind.DEDENT):
            if toks[j][0] == TokenKind.INDENT:
                depth += 1
            else:
                depth -= 1
            j += 1
        if j >= n:
            break
        kind, text, off = toks[j]
        head = text
        if text == "async" and j + 1 < n and toks[j + 1][1] == "def":
            head = "def"
        is_decorator = kind == TokenKind.PUNCTUATION and text == "@"
        is_def = kind == TokenKind.KEYWORD and head in ("def", "class")
        priority = _HARD
        if i > 0:
            prev_end = toks[i - 1][2] + len(toks[i - 1][1])
            if "\n" in source[prev_end:toks[i][2]]:
                priority = _BLANK
            if (is_def or is_decorator) and not prev_decorator:
                priority = _TOP_DEF if depth == 0 else _NESTED_DEF
        out.append((i, priority))
        prev_decorator = is_decorator
        # advance to the token after this line's newline
        k = j
        while k < n and toks[k][0] != TokenKind.NEWLINE:
            k += 1
        i = k + 1
    return out


def _split_range(lo: int, hi: int, cuts: List[Tuple[int, int]], level: int, max_tokens: int) -> List[Tuple[int, int]]:
    if hi - lo <= max_tokens:
        return [(lo, hi)]
    if level == _HARD:
        return [(s, min(s + max_tokens, hi)) for s in range(lo, hi, max_tokens)]
    points = [i for i, p in cuts if lo < i < hi and p >= level]
    if not points:
        return _split_range(lo, hi, cuts, level - 1, max_tokens)
    bounds = [lo] + points + [hi]
    pieces = list(zip(bounds[:-1], bounds[1:]))
    out: List[Tuple[int, int]] = []
    cur_lo: Optional[int] = None
    cur_hi = lo
    for a, b in pieces:
        if b - a > max_tokens:
            if cur_lo is not None:
                out.append((cur_lo, cur_hi))
                cur_lo = None
            out.extend(_split_range(a, b, cuts, level - 1, max_tokens))
            continue
        if cur_lo is not None and b - cur_lo <= max_tokens:
            cur_hi = b
        else:
            if cur_lo is not None:
                out.append((cur_lo, cur_hi))
            cur_lo, cur_hi = a, b
    if cur_lo is not None:
        out.append((cur_lo, cur_hi))
    return out


def chunk_file(
    file_path: Union[str, Path],
    source: Union[str, bytes],
    max_tokens: int = MAX_CHUNK_TOKENS,
    repo_id: str = "",
) -> List[Chunk]:
    """Slice one file into chunks of at most *max_tokens* tokens.

    Every top-level ``def``/``class`` (with its decorators) starts a new chunk.
    A unit that is still too long is split at nested definitions, then at
    blank lines, and finally cut at exactly *max_tokens* tokens. Consecutive
    pieces produced by the fallback splits are packed greedily.
    """
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    text = _as_text(source)
    path = Path(file_path).as_posix()
    toks = list(_scan(text))
    if not toks:
        return []
    cuts = _line_boundaries(text, toks)
    top = [i for i, p in cuts if p == _TOP_DEF]
    bounds = [0] + [i for i in top if i > 0] + [len(toks)]
    ranges: List[Tuple[int, int]] = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if hi > lo:
            ranges.extend(_split_range(lo, hi, cuts, _NESTED_DEF, max_tokens))

    to_byte = _ByteMapper(text)
    chunks = []
    for lo, hi in ranges:
        c_start = toks[lo][2]
        last = toks[hi - 1]
        c_end = last[2] + len(last[1])
        span = (to_byte(c_start), to_byte(c_end))
        chunks.append(
            Chunk(
                chunk_id=chunk_id_for(repo_id, path, span),
                file_path=path,
                byte_span=span,
                token_count=hi - lo,
                text=text[c_start:c_end],
            )
        )
    return chunks


def extract_entities(source: Union[str, bytes], budget_tokens: int = ENTITY_TOKEN_BUDGET) -> EntityList:
    """Collect dotted names of classes and functions in traversal order.

    Names are qualified by their enclosing class/function scopes. Collection
    stops at the first name that would push the total token count (names
    measured with :func:`tokenize`) past *budget_tokens*. Malformed
    definitions such as ``def (`` are ignored.
    """
    if budget_tokens < 0:
        raise ValueError("budget_tokens must be >= 0")
    text = _as_text(source)
    toks = list(_scan(text))
    scopes: List[Tuple[int, str]] = []
    seen = set()
    names: List[str] = []
    used = 0
    depth = 0
    at_line_start = True
    n = len(toks)
    i = 0
    while i < n:
        kind, tok, _ = toks[i]
        if kind == TokenKind.INDENT:
            depth += 1
        elif kind == TokenKind.DEDENT:
            depth -= 1
        elif kind == TokenKind.NEWLINE:
            at_line_start = True
            i += 1
            continue
        elif at_line_start:
            at_line_start = False
            j = i + 1 if tok == "async" else i
            if j < n and toks[j][0] == TokenKind.KEYWORD and toks[j][1] in ("def", "class"):
                if j + 1 < n and toks[j + 1][0] == TokenKind.IDENTIFIER:
                    name = toks[j + 1][1]
                    while scopes and scopes[-1][0] >= depth:
                        scopes.pop()
                    qualified = ".".join([s for _, s in scopes] + [name])
                    scopes.append((depth, name))
                    if qualified not in seen:
                        cost = len(token_texts(qualified))
                        if used + cost > budget_tokens:
                            break
                        seen.add(qualified)
                        names.append(qualified)
                        used += cost
        i += 1
    return EntityList(names=tuple(names), token_budget_used=used)


def write_chunks_jsonl(chunks: Iterable[Chunk], path: Union[str, Path]) -> int:
    """Export chunks as line-delimited JSON. Returns the record count."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for chunk in chunks:
            fh.write(json.dumps(chunk.to_record(), ensure_ascii=False) + "\n")
            count += 1
    return count


def read_chunks_jsonl(path: Union[str, Path]) -> List[Chunk]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(
                    Chunk(
                        chunk_id=int(rec["chunk_id"]),
                        file_path=rec["file_path"],
                        byte_span=(int(rec["byte_span"][0]), int(rec["byte_span"][1])),
                        token_count=int(rec["token_count"]),
                        text=rec["text"],
                    )
                )
            except (ValueError, KeyError, TypeError, IndexError) as exc:
                raise CorpusError(f"line {lineno}: malformed chunk record ({exc})") from exc
    return out
