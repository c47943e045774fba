"""SQL tokenization, clause-boundary segmentation and terminality checks.

Fragments are the unit of search: each one starts at a clause keyword and
runs up to (not including) the next.  The same boundaries drive prefix
truncation for the progressive-generation corpus, so a gold query split by
:func:`segment_at_boundaries` yields exactly the fragment chain the search
would have to produce.
"""

from __future__ import annotations

import re
import sqlite3
import threading
from typing import Iterable, NamedTuple

from .errors import TokenizeError

DEFAULT_BOUNDARIES: tuple[str, ...] = (
    "SELECT", "FROM", "WHERE", "GROUP", "HAVING", "ORDER", "LIMIT",
    "UNION", "INTERSECT", "EXCEPT", "JOIN", "AND", "OR", "ON",
)

EOS_MARKERS: tuple[str, ...] = ("</s>", "<|endoftext|>", "<|im_end|>", "<|eot_id|>", "<eos>")

KEYWORDS = frozenset("""
    ALL AND AS ASC AVG BETWEEN BY CASE CAST COLLATE COUNT CROSS DESC DISTINCT
    ELSE END ESCAPE EXCEPT EXISTS FROM FULL GLOB GROUP HAVING IN INNER
    INTERSECT IS ISNULL JOIN LEFT LIKE LIMIT MAX MIN NATURAL NOT NOTNULL NULL
    OFFSET ON OR ORDER OUTER RIGHT SELECT SUM THEN UNION USING VALUES WHEN
    WHERE WITH RECURSIVE
""".split())

KEYWORD, IDENTIFIER, LITERAL, OPERATOR, PUNCTUATION = (
    "keyword", "identifier", "literal", "operator", "punctuation",
)


class Token(NamedTuple):
    text: str
    kind: str
    offset: int


class BoundarySet:
    """Ordered, uppercase, duplicate-free set of clause keywords."""

    def __init__(self, keywords: Iterable[str] = DEFAULT_BOUNDARIES):
        words = [k.upper() for k in keywords]
        if len(set(words)) != len(words):
            raise ValueError("boundary keywords must be unique")
        self.keywords = tuple(words)
        self._set = frozenset(words)

    def __contains__(self, word: str) -> bool:
        return word.upper() in self._set

    def __iter__(self):
        return iter(self.keywords)

    def __repr__(self) -> str:
        return f"BoundarySet({list(self.keywords)!r})"


DEFAULT_BOUNDARY_SET = BoundarySet()

_WS = re.compile(r"\s+")
_NUMBER = re.compile(r"(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?")
_WORD = re.compile(r"[A-Za-z_][A-Za-z0-9_$]*")
_OPERATORS = ("<=", ">=", "<>", "!=", "==", "||", "<<", ">>",
              "=", "<", ">", "+", "-", "*", "/", "%", "&", "|", "~")
_PUNCT = "(),.;"


def _scan_quoted(sql: str, pos: int, close: str, strict: bool) -> int:
    """Return the index just past the closing quote starting at ``pos``."""
    i = pos + 1
    n = len(sql)
    while i < n:
        if sql[i] == close:
            # doubled quote is an escaped quote
            if close != "]" and i + 1 < n and sql[i + 1] == close:
                i += 2
                continue
            return i + 1
        i += 1
    if strict:
        raise TokenizeError(f"unterminated quoted token at offset {pos}")
    return n


def tokenize(sql: str, strict: bool = True) -> list[Token]:
    """Split ``sql`` into tokens, dropping whitespace and comments.

    With ``strict=False`` an unterminated string or comment runs to the end of
    the input instead of raising.
    """
    tokens: list[Token] = []
    i, n = 0, len(sql)
    while i < n:
        ch = sql[i]
        m = _WS.match(sql, i)
        if m:
            i = m.end()
            continue
        if sql.startswith("--", i):
            j = sql.find("\n", i)
            i = n if j < 0 else j + 1
            continue
        if sql.startswith("/*", i):
            j = sql.find("*/", i + 2)
            if j < 0:
                if strict:
                    raise TokenizeError(f"unterminated comment at offset {i}")
                i = n
            else:
                i = j + 2
            continue
        if ch == "'":
            j = _scan_quoted(sql, i, "'", strict)
            tokens.append(Token(sql[i:j], LITERAL, i))
            i = j
            continue
        if ch in "\"`[":
            j = _scan_quoted(sql, i, {"\"": "\"", "`": "`", "[": "]"}[ch], strict)
            tokens.append(Token(sql[i:j], IDENTIFIER, i))
            i = j
            continue
        m = _NUMBER.match(sql, i)
        if m:
            tokens.append(Token(m.group(), LITERAL, i))
            i = m.end()
            continue
        m = _WORD.match(sql, i)
        if m:
            word = m.group()
            kind = KEYWORD if word.upper() in KEYWORDS else IDENTIFIER
            tokens.append(Token(word, kind, i))
            i = m.end()
            continue
        if ch in _PUNCT:
            tokens.append(Token(ch, PUNCTUATION, i))
            i += 1
            continue
        for op in _OPERATORS:
            if sql.startswith(op, i):
                tokens.append(Token(op, OPERATOR, i))
                i += len(op)
                break
        else:
            # unknown characters (parameters, stray symbols) pass through as operators
            tokens.append(Token(ch, OPERATOR, i))
            i += 1
    return tokens


def _is_boundary(tok: Token, boundaries: BoundarySet) -> bool:
    return tok.kind == KEYWORD and tok.text in boundaries


def segment_at_boundaries(sql: str, boundaries: BoundarySet = DEFAULT_BOUNDARY_SET) -> list[int]:
    """Offsets just before every boundary keyword except the leading one."""
    tokens = tokenize(sql)
    return [t.offset for k, t in enumerate(tokens) if k > 0 and _is_boundary(t, boundaries)]


def truncate_for_psg(gold_sql: str, boundaries: BoundarySet = DEFAULT_BOUNDARY_SET) -> list[tuple[str, str]]:
    """(prefix, completion) pairs, one per cut point, in ascending prefix length."""
    return [(gold_sql[:off], gold_sql[off:]) for off in segment_at_boundaries(gold_sql, boundaries)]


def split_fragments(sql: str, boundaries: BoundarySet = DEFAULT_BOUNDARY_SET) -> list[str]:
    """Cut ``sql`` into the fragment chain whose concatenation is ``sql``."""
    cuts = [0] + segment_at_boundaries(sql, boundaries) + [len(sql)]
    return [sql[a:b] for a, b in zip(cuts, cuts[1:]) if b > a]


def clip_continuation(raw: str, boundaries: BoundarySet = DEFAULT_BOUNDARY_SET) -> tuple[str, bool]:
    """Keep ``raw`` up to its second boundary keyword.

    Returns ``(fragment, ends_sequence)``; the flag is set when a statement
    terminator or end-of-sequence marker occurs before the cut.
    """
    text = raw
    ends = False
    eos_at = min((p for p in (raw.find(m) for m in EOS_MARKERS) if p >= 0), default=-1)
    if eos_at >= 0:
        text = raw[:eos_at]
        ends = True

    seen = 0
    for tok in tokenize(text, strict=False):
        if tok.kind == PUNCTUATION and tok.text == ";":
            return text[:tok.offset + 1], True
        if _is_boundary(tok, boundaries):
            seen += 1
            if seen == 2:
                return text[:tok.offset], False
    return text, ends


def similarity_tokens(fragment: str) -> frozenset[str]:
    """Lowercased content tokens (punctuation dropped) used for Jaccard dedupe."""
    return frozenset(
        t.text.lower() for t in tokenize(fragment, strict=False) if t.kind != PUNCTUATION
    )


def jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def has_top_level_order_by(sql: str) -> bool:
    depth = 0
    toks = tokenize(sql, strict=False)
    for k, tok in enumerate(toks):
        if tok.text == "(":
            depth += 1
        elif tok.text == ")":
            depth -= 1
        elif depth == 0 and tok.kind == KEYWORD and tok.text.upper() == "ORDER":
            if k + 1 < len(toks) and toks[k + 1].text.upper() == "BY":
                return True
    return False


_SYNTAX_MARKERS = ("syntax error", "incomplete input", "unrecognized token")
_local = threading.local()


def _scratch_connection() -> sqlite3.Connection:
    conn = getattr(_local, "conn", None)
    if conn is None:
        conn = sqlite3.connect(":memory:", check_same_thread=False)
        _local.conn = conn
    return conn


def is_complete_sql(text: str) -> bool:
    """True iff ``text`` compiles as exactly one complete SELECT statement.

    Compilation happens against an empty in-memory database, so unknown
    tables or columns do not count against completeness; only the grammar
    does.
    """
    try:
        toks = tokenize(text)
    except TokenizeError:
        return False
    if not toks or toks[0].text.upper() not in ("SELECT", "WITH"):
        return False
    body = text.strip()
    if body.endswith(";"):
        body = body[:-1]
    if ";" in [t.text for t in toks[:-1]]:
        return False
    try:
        _scratch_connection().execute("EXPLAIN " + body)
    except sqlite3.Warning:
        return False
    except sqlite3.Error as exc:
        msg = str(exc).lower()
        return not any(marker in msg for marker in _SYNTAX_MARKERS)
    return True
