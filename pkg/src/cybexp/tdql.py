"""TDQL: the archive's small query language.

Grammar::

    query   := FETCH target [WHERE cond (AND cond)*]
               [SINCE ts] [UNTIL ts] [LIMIT n]
    target  := events | attributes | objects | sessions | count(events)
    cond    := attribute <sub_type> = <string-or-number>
             | hash = <hex64>
             | ref CONTAINS <hex64-or-encrypted-token-string>
             | score < <real>
             | session = <hex64>

Keywords are case-insensitive; string values are double-quoted with JSON
escapes and stay case-sensitive.  Timestamps are ISO-8601 (date or
date-time, UTC unless an offset is given); bare integers are accepted as
epoch seconds.  A query must carry at least one condition or one time
bound.

Execution never looks inside stored attribute payloads.  A value
condition is resolved by hashing the attribute the querier claims to
know, expanding that digest with any held edge secrets, and joining the
resulting terms against the _ref index; conjunction intersects the
per-condition sets; the window then filters on event timestamps
(inclusive on both ends); results are ordered by (timestamp, _hash)
ascending.  `score <` is strict and never matches unscored events.
Querying a sub_type nobody ever stored simply hashes to a term no
instance carries: an empty result, not an error.
"""

import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple, Union

from .privacy import EdgeSecret, expand_query_terms
from .store import ArchiveStore
from .tahoe import hash_instance, is_edge_hash

KEYWORDS = {"FETCH", "WHERE", "AND", "SINCE", "UNTIL", "LIMIT", "CONTAINS"}
TARGETS = ("events", "attributes", "objects", "sessions")


class TdqlError(ValueError):
    pass


class TdqlLexError(TdqlError):
    def __init__(self, message: str, position: int):
        super().__init__("%s at position %d" % (message, position))
        self.position = position


class TdqlSyntaxError(TdqlError):
    def __init__(self, position: int, token_index: int, expected, found: str):
        self.position = position
        self.token_index = token_index  # 1-based token ordinal
        self.expected = frozenset(expected)
        self.found = found
        super().__init__(
            "syntax error at token %d (position %d): expected %s, found %s"
            % (token_index, position, "|".join(sorted(self.expected)), found)
        )


# ---------------------------------------------------------------------------
# tokens


@dataclass(frozen=True)
class Token:
    kind: str  # KW, IDENT, STRING, NUMBER, HEX, TIME, SYM, EOF
    text: str
    value: Any
    pos: int


_WS = re.compile(r"\s+")
_HEX64 = re.compile(r"[0-9a-fA-F]{64}(?![0-9A-Za-z_])")
_TIME = re.compile(
    r"\d{4}-\d{2}-\d{2}(?:[Tt]\d{2}:\d{2}:\d{2}(?:[Zz]|[+-]\d{2}:\d{2})?)?"
    r"(?![0-9A-Za-z_])"
)
_NUMBER = re.compile(r"-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?(?![0-9A-Za-z_.])")
_WORD = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_SYMBOLS = "=<()"


def _lex_string(text: str, start: int) -> Tuple[Token, int]:
    i = start + 1
    while i < len(text):
        c = text[i]
        if c == "\\":
            i += 2
            continue
        if c == '"':
            segment = text[start : i + 1]
            try:
                value = json.loads(segment)
            except ValueError:
                raise TdqlLexError("bad escape in string", start)
            return Token("STRING", segment, value, start), i + 1
        i += 1
    raise TdqlLexError("unterminated string", start)


def tokenize(text: str) -> List[Token]:
    """Token stream for a query; raises TdqlLexError, nothing else."""
    if not isinstance(text, str):
        raise TdqlLexError("query must be text", 0)
    out: List[Token] = []
    i = 0
    n = len(text)
    while i < n:
        m = _WS.match(text, i)
        if m:
            i = m.end()
            continue
        c = text[i]
        if c == '"':
            tok, i = _lex_string(text, i)
            out.append(tok)
            continue
        m = _HEX64.match(text, i)
        if m:
            out.append(Token("HEX", m.group(0), m.group(0).lower(), i))
            i = m.end()
            continue
        m = _TIME.match(text, i)
        if m:
            out.append(Token("TIME", m.group(0), m.group(0), i))
            i = m.end()
            continue
        m = _NUMBER.match(text, i)
        if m:
            t = m.group(0)
            value = int(t) if re.fullmatch(r"-?\d+", t) else float(t)
            out.append(Token("NUMBER", t, value, i))
            i = m.end()
            continue
        m = _WORD.match(text, i)
        if m:
            word = m.group(0)
            if word.upper() in KEYWORDS:
                out.append(Token("KW", word, word.upper(), i))
            else:
                out.append(Token("IDENT", word, word.lower(), i))
            i = m.end()
            continue
        if c in _SYMBOLS:
            out.append(Token("SYM", c, c, i))
            i += 1
            continue
        raise TdqlLexError("illegal character %r" % c, i)
    out.append(Token("EOF", "", None, n))
    return out


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class AttributeIs:
    sub_type: str
    value: Union[str, int, float]


@dataclass(frozen=True)
class HashIs:
    digest: str


@dataclass(frozen=True)
class RefContains:
    term: str  # plaintext hex or encrypted edge token


@dataclass(frozen=True)
class ScoreBelow:
    threshold: float


@dataclass(frozen=True)
class SessionIs:
    digest: str


Condition = Union[AttributeIs, HashIs, RefContains, ScoreBelow, SessionIs]


@dataclass(frozen=True)
class Query:
    target: str
    count: bool = False
    conditions: Tuple[Condition, ...] = ()
    since: Optional[int] = None
    until: Optional[int] = None
    limit: Optional[int] = None


# ---------------------------------------------------------------------------
# parser


def _iso_to_epoch(text: str, pos: int, index: int) -> int:
    t = text.upper()
    try:
        if "T" not in t:
            dt = datetime.strptime(t, "%Y-%m-%d").replace(tzinfo=timezone.utc)
        elif t.endswith("Z"):
            dt = datetime.strptime(t, "%Y-%m-%dT%H:%M:%SZ").replace(
                tzinfo=timezone.utc
            )
        else:
            dt = datetime.strptime(t[:19], "%Y-%m-%dT%H:%M:%S")
            sign = 1 if t[19] == "+" else -1
            hh, mm = int(t[20:22]), int(t[23:25])
            dt = dt.replace(tzinfo=timezone.utc)
            return int(dt.timestamp()) - sign * (hh * 3600 + mm * 60)
    except ValueError:
        raise TdqlSyntaxError(pos, index, {"valid timestamp"}, text)
    return int(dt.timestamp())


class _Parser:
    def __init__(self, tokens: List[Token]):
        self.tokens = tokens
        self.i = 0

    @property
    def here(self) -> Token:
        return self.tokens[self.i]

    def _fail(self, expected) -> "TdqlSyntaxError":
        tok = self.here
        found = tok.text if tok.kind != "EOF" else "<end of query>"
        raise TdqlSyntaxError(tok.pos, self.i + 1, expected, found)

    def take_kw(self, word: str) -> Token:
        tok = self.here
        if tok.kind == "KW" and tok.value == word:
            self.i += 1
            return tok
        self._fail({word})

    def peek_kw(self, word: str) -> bool:
        return self.here.kind == "KW" and self.here.value == word

    def take_ident(self, *choices: str) -> str:
        tok = self.here
        if tok.kind in ("IDENT", "HEX") and (
            not choices or str(tok.value).lower() in choices
        ):
            self.i += 1
            return str(tok.value).lower()
        self._fail(set(choices) if choices else {"identifier"})

    def take_sym(self, sym: str) -> None:
        tok = self.here
        if tok.kind == "SYM" and tok.value == sym:
            self.i += 1
            return
        self._fail({sym})

    def take_hex(self) -> str:
        tok = self.here
        if tok.kind == "HEX":
            self.i += 1
            return tok.value
        self._fail({"64-hex digest"})

    def take_timestamp(self) -> int:
        tok = self.here
        if tok.kind == "TIME":
            self.i += 1
            return _iso_to_epoch(tok.text, tok.pos, self.i)
        if tok.kind == "NUMBER" and isinstance(tok.value, int):
            self.i += 1
            return tok.value
        self._fail({"ISO-8601 timestamp", "epoch seconds"})

    def condition(self) -> Condition:
        kind = self.take_ident("attribute", "hash", "ref", "score", "session")
        if kind == "attribute":
            sub_type = self.take_ident()
            self.take_sym("=")
            tok = self.here
            if tok.kind in ("STRING", "NUMBER"):
                self.i += 1
                return AttributeIs(sub_type=sub_type, value=tok.value)
            self._fail({"string", "number"})
        if kind == "hash":
            self.take_sym("=")
            return HashIs(digest=self.take_hex())
        if kind == "ref":
            self.take_kw("CONTAINS")
            tok = self.here
            if tok.kind == "HEX":
                self.i += 1
                return RefContains(term=tok.value)
            if tok.kind == "STRING":
                self.i += 1
                return RefContains(term=tok.value)
            self._fail({"64-hex digest", "encrypted edge token string"})
        if kind == "score":
            self.take_sym("<")
            tok = self.here
            if tok.kind == "NUMBER":
                self.i += 1
                return ScoreBelow(threshold=float(tok.value))
            self._fail({"number"})
        self.take_sym("=")
        return SessionIs(digest=self.take_hex())

    def query(self) -> Query:
        self.take_kw("FETCH")
        count = False
        target = self.take_ident(*(TARGETS + ("count",)))
        if target == "count":
            self.take_sym("(")
            self.take_ident("events")
            self.take_sym(")")
            target, count = "events", True

        conditions: List[Condition] = []
        if self.peek_kw("WHERE"):
            self.i += 1
            conditions.append(self.condition())
            while self.peek_kw("AND"):
                self.i += 1
                conditions.append(self.condition())
        since = until = limit = None
        if self.peek_kw("SINCE"):
            self.i += 1
            since = self.take_timestamp()
        if self.peek_kw("UNTIL"):
            self.i += 1
            until = self.take_timestamp()
        if self.peek_kw("LIMIT"):
            self.i += 1
            tok = self.here
            if tok.kind == "NUMBER" and isinstance(tok.value, int) and tok.value > 0:
                self.i += 1
                limit = tok.value
            else:
                self._fail({"positive integer"})
        if self.here.kind != "EOF":
            self._fail({"WHERE", "SINCE", "UNTIL", "LIMIT", "<end of query>"})
        if not conditions and since is None and until is None:
            self._fail({"WHERE", "SINCE", "UNTIL"})
        return Query(
            target=target,
            count=count,
            conditions=tuple(conditions),
            since=since,
            until=until,
            limit=limit,
        )


def parse(text: str) -> Query:
    return _Parser(tokenize(text)).query()


# ---------------------------------------------------------------------------
# renderer


def _render_value(value: Union[str, int, float]) -> str:
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _render_time(ts: int) -> str:
    if not 0 <= ts <= 253402300799:  # strftime range; epoch form also parses
        return str(ts)
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime(
        "%Y-%m-%dT%H:%M:%SZ"
    )


def render_condition(cond: Condition) -> str:
    if isinstance(cond, AttributeIs):
        return "attribute %s = %s" % (cond.sub_type, _render_value(cond.value))
    if isinstance(cond, HashIs):
        return "hash = %s" % cond.digest
    if isinstance(cond, RefContains):
        if is_edge_hash(cond.term):
            return "ref CONTAINS %s" % cond.term
        return "ref CONTAINS %s" % json.dumps(cond.term, ensure_ascii=False)
    if isinstance(cond, ScoreBelow):
        return "score < %s" % repr(cond.threshold)
    if isinstance(cond, SessionIs):
        return "session = %s" % cond.digest
    raise TdqlError("unknown condition %r" % (cond,))


def render(query: Query) -> str:
    """Canonical text for a query; parse(render(q)) == q."""
    parts = ["FETCH", "count(events)" if query.count else query.target]
    if query.conditions:
        parts.append("WHERE")
        parts.append(" AND ".join(render_condition(c) for c in query.conditions))
    if query.since is not None:
        parts.append("SINCE %s" % _render_time(query.since))
    if query.until is not None:
        parts.append("UNTIL %s" % _render_time(query.until))
    if query.limit is not None:
        parts.append("LIMIT %d" % query.limit)
    return " ".join(parts)


# ---------------------------------------------------------------------------
# executor


def _attribute_terms(
    cond: AttributeIs, secrets: Sequence[EdgeSecret]
) -> Set[str]:
    digest = hash_instance(
        {"itype": "attribute", "sub_type": cond.sub_type, "data": cond.value}
    )
    return expand_query_terms(digest, secrets)


def _condition_matches(
    cond: Condition, store: ArchiveStore, secrets: Sequence[EdgeSecret]
) -> Set[str]:
    if isinstance(cond, AttributeIs):
        terms = _attribute_terms(cond, secrets)
        hits: Set[str] = set()
        for term in terms:
            if term in store:
                hits.add(term)
            hits |= store.referrers(term)
        return hits
    if isinstance(cond, HashIs):
        return {cond.digest} if cond.digest in store else set()
    if isinstance(cond, RefContains):
        return store.referrers(cond.term)
    if isinstance(cond, ScoreBelow):
        hits = set()
        for doc in store.iter_kind("event"):
            score = doc.get("_malicious_score")
            if score is not None and score < cond.threshold:
                hits.add(doc["_hash"])
        return hits
    if isinstance(cond, SessionIs):
        doc = store.get_internal(cond.digest)
        if doc is None or doc.get("itype") != "session":
            return set()
        return set(doc["_ref"]) | {cond.digest}
    raise TdqlError("unknown condition %r" % (cond,))


def execute(
    query: Query,
    store: ArchiveStore,
    secrets: Sequence[EdgeSecret] = (),
) -> Union[List[Dict[str, Any]], int]:
    """Run a parsed query; returns documents, or an int for count targets."""
    if not query.conditions and query.since is None and query.until is None:
        raise TdqlError("query needs a condition or a time window")

    candidates: Optional[Set[str]] = None
    for cond in query.conditions:
        hits = _condition_matches(cond, store, secrets)
        candidates = hits if candidates is None else (candidates & hits)
        if not candidates:
            break

    docs: List[Dict[str, Any]] = []
    if candidates is None:
        pool = store.iter_kind(query.target[:-1])  # events -> event etc.
    else:
        pool = (store.get_internal(h) for h in candidates)
    kind = query.target[:-1]
    for doc in pool:
        if doc is None or doc.get("itype") != kind:
            continue
        if query.since is not None or query.until is not None:
            ts = doc.get("timestamp")
            if not isinstance(ts, int):
                continue
            if query.since is not None and ts < query.since:
                continue
            if query.until is not None and ts > query.until:
                continue
        docs.append(doc)

    docs.sort(key=lambda d: (d.get("timestamp", 0), d["_hash"]))
    if query.limit is not None:
        docs = docs[: query.limit]
    if query.count:
        return len(docs)
    import copy

    return [copy.deepcopy(d) for d in docs]


def run(
    text: str, store: ArchiveStore, secrets: Sequence[EdgeSecret] = ()
) -> Union[List[Dict[str, Any]], int]:
    return execute(parse(text), store, secrets)
