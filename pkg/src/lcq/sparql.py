"""SPARQL-subset parser and evaluator.

Covers exactly what the canned lifecycle queries need: PREFIX, SELECT
[DISTINCT] ?v.../*, basic graph patterns, UNION between braced groups,
FILTER NOT EXISTS { ... }, and FILTER(?a = ?b / ?a != ?b) equality tests.
Everything else in SPARQL is rejected as an unsupported construct.

Evaluation runs over a Dataset's union-default view with standard
semantics: patterns join on shared variables, UNION contributes the bag
union of its branch solutions, FILTER NOT EXISTS keeps a row iff the row's
bindings admit no solution of the inner group, and comparison filters drop
rows with unbound operands. Filters apply to their whole group.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Optional, Union as TUnion

from lcq.rdfmodel import Dataset, Graph, Iri, Literal, Term, Variable


class SparqlError(ValueError):
    pass


class SparqlSyntaxError(SparqlError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"syntax error at {line}:{col}: {message}")
        self.line = line
        self.col = col


class UnsupportedSparqlError(SparqlError):
    def __init__(self, construct: str):
        super().__init__(f"unsupported construct: {construct}")
        self.construct = construct


# --- AST ----------------------------------------------------------------------

PatternTerm = TUnion[Iri, Literal, Variable]


@dataclass(frozen=True)
class TriplePattern:
    subject: PatternTerm
    predicate: PatternTerm
    object: PatternTerm

    def __post_init__(self) -> None:
        if isinstance(self.subject, Literal):
            raise SparqlError("literal not allowed as pattern subject")
        if isinstance(self.predicate, Literal):
            raise SparqlError("literal not allowed as pattern predicate")

    def terms(self) -> tuple:
        return (self.subject, self.predicate, self.object)


@dataclass(frozen=True)
class UnionPattern:
    left: "GroupPattern"
    right: "GroupPattern"


@dataclass(frozen=True)
class FilterNotExists:
    inner: "GroupPattern"


@dataclass(frozen=True)
class FilterCompare:
    lhs: PatternTerm
    op: str  # "=" | "!="
    rhs: PatternTerm


GroupElement = TUnion[TriplePattern, UnionPattern, FilterNotExists, FilterCompare]


@dataclass(frozen=True)
class GroupPattern:
    elements: tuple = ()

    def pattern_variables(self) -> list:
        """Variables bound by patterns in this group, in first appearance order."""
        seen: list = []

        def walk(group: "GroupPattern") -> None:
            for el in group.elements:
                if isinstance(el, TriplePattern):
                    for t in el.terms():
                        if isinstance(t, Variable) and t.name not in seen:
                            seen.append(t.name)
                elif isinstance(el, UnionPattern):
                    walk(el.left)
                    walk(el.right)

        walk(self)
        return seen

    def all_variables(self) -> set:
        """Every variable mentioned anywhere in the group, filters included."""
        out: set = set()

        def walk(group: "GroupPattern") -> None:
            for el in group.elements:
                if isinstance(el, TriplePattern):
                    for t in el.terms():
                        if isinstance(t, Variable):
                            out.add(t.name)
                elif isinstance(el, UnionPattern):
                    walk(el.left)
                    walk(el.right)
                elif isinstance(el, FilterNotExists):
                    walk(el.inner)
                elif isinstance(el, FilterCompare):
                    for t in (el.lhs, el.rhs):
                        if isinstance(t, Variable):
                            out.add(t.name)

        walk(self)
        return out


@dataclass(frozen=True)
class QueryAst:
    select: tuple  # variable names, or ("*",)
    where: GroupPattern
    distinct: bool = False
    prefixes: tuple = ()  # ((prefix, iri-string), ...)

    @property
    def select_all(self) -> bool:
        return self.select == ("*",)


@dataclass
class BindingTable:
    """Tabular solution set: ordered columns, rows as var-name -> Term maps.

    Rows form a bag; DISTINCT deduplicates. A variable absent from a row is
    unbound (possible only via UNION branches).
    """

    columns: list
    rows: list = field(default_factory=list)

    def as_set(self) -> frozenset:
        return frozenset(frozenset(r.items()) for r in self.rows)

    def values(self, column: str) -> set:
        return {r[column] for r in self.rows if column in r}

    def to_json_dict(self) -> dict:
        """SPARQL-results-style JSON; bindings canonically sorted for stable output."""
        bindings = []
        for row in self.rows:
            b = {}
            for var in self.columns:
                term = row.get(var)
                if term is None:
                    continue
                if isinstance(term, Iri):
                    b[var] = {"type": "uri", "value": term.value}
                else:
                    entry = {"type": "literal", "value": term.lexical}
                    if term.datatype is not None:
                        entry["datatype"] = term.datatype.value
                    b[var] = entry
            bindings.append(b)
        bindings.sort(key=lambda b: json.dumps(b, sort_keys=True))
        return {"head": {"vars": list(self.columns)}, "results": {"bindings": bindings}}

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), separators=(",", ":"))


# --- parser -------------------------------------------------------------------

_UNSUPPORTED_KEYWORDS = {
    "OPTIONAL": "OPTIONAL",
    "SERVICE": "SERVICE",
    "GRAPH": "GRAPH",
    "MINUS": "MINUS",
    "BIND": "BIND",
    "VALUES": "VALUES",
    "ORDER": "ORDER BY",
    "GROUP": "GROUP BY",
    "HAVING": "HAVING",
    "LIMIT": "LIMIT",
    "OFFSET": "OFFSET",
    "ASK": "ASK",
    "CONSTRUCT": "CONSTRUCT",
    "DESCRIBE": "DESCRIBE",
    "BASE": "BASE",
    "EXISTS": "FILTER EXISTS",
    "INSERT": "INSERT",
    "DELETE": "DELETE",
    "REDUCED": "REDUCED",
    "FROM": "FROM",
}

_TOKEN_RE = re.compile(
    r"""
      (?P<ws>\s+)
    | (?P<comment>\#[^\n]*)
    | (?P<iri><[^<>"{}|^`\\\x00-\x20]*>)
    | (?P<var>\?[A-Za-z_][A-Za-z0-9_]*)
    | (?P<string>"(?:[^"\\]|\\.)*")
    | (?P<dtype>\^\^)
    | (?P<neq>!=)
    | (?P<number>-?[0-9]+(?:\.[0-9]+)?)
    | (?P<pname>[A-Za-z_][A-Za-z0-9_\-]*:[A-Za-z0-9_\-.]*)
    | (?P<keyword>[A-Za-z_][A-Za-z0-9_]*)
    | (?P<punct>[{}().=*])
    """,
    re.VERBOSE,
)

_STRING_ESCAPES = {"t": "\t", "b": "\b", "n": "\n", "r": "\r", "f": "\f", '"': '"', "'": "'", "\\": "\\"}


@dataclass
class _Token:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list:
    tokens = []
    pos = 0
    line = 1
    line_start = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise SparqlSyntaxError(
                f"unexpected character {text[pos]!r}", line, pos - line_start + 1
            )
        kind = m.lastgroup
        tok_text = m.group()
        if kind not in ("ws", "comment"):
            tokens.append(_Token(kind, tok_text, line, pos - line_start + 1))
        newlines = tok_text.count("\n")
        if newlines:
            line += newlines
            line_start = pos + tok_text.rfind("\n") + 1
        pos = m.end()
    tokens.append(_Token("eof", "", line, pos - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0
        self.prefixes: dict = {}

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def next(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message: str, tok: Optional[_Token] = None) -> SparqlSyntaxError:
        tok = tok or self.peek()
        return SparqlSyntaxError(message, tok.line, tok.col)

    def at_keyword(self, word: str) -> bool:
        tok = self.peek()
        return tok.kind == "keyword" and tok.text.upper() == word

    def expect_keyword(self, word: str) -> None:
        if not self.at_keyword(word):
            raise self.error(f"expected {word}")
        self.next()

    def expect_punct(self, ch: str) -> None:
        tok = self.peek()
        if tok.kind not in ("punct", "neq") or tok.text != ch:
            raise self.error(f"expected {ch!r}")
        self.next()

    def check_unsupported(self) -> None:
        tok = self.peek()
        if tok.kind == "keyword":
            construct = _UNSUPPORTED_KEYWORDS.get(tok.text.upper())
            if construct:
                raise UnsupportedSparqlError(construct)

    # -- terms --

    def _expand_pname(self, tok: _Token) -> Iri:
        prefix, _, local = tok.text.partition(":")
        if prefix not in self.prefixes:
            raise self.error(f"undeclared prefix {prefix!r}", tok)
        try:
            return Iri(self.prefixes[prefix] + local)
        except ValueError as exc:
            raise self.error(str(exc), tok) from exc

    def _read_iri_token(self, tok: _Token) -> Iri:
        try:
            return Iri(tok.text[1:-1])
        except ValueError as exc:
            raise self.error(str(exc), tok) from exc

    def _unescape_string(self, tok: _Token) -> str:
        raw = tok.text[1:-1]
        out = []
        i = 0
        while i < len(raw):
            c = raw[i]
            if c != "\\":
                out.append(c)
                i += 1
                continue
            e = raw[i + 1]
            if e not in _STRING_ESCAPES:
                raise self.error(f"unknown escape '\\{e}'", tok)
            out.append(_STRING_ESCAPES[e])
            i += 2
        return "".join(out)

    def parse_term(self) -> PatternTerm:
        self.check_unsupported()
        tok = self.next()
        if tok.kind == "iri":
            return self._read_iri_token(tok)
        if tok.kind == "pname":
            return self._expand_pname(tok)
        if tok.kind == "var":
            return Variable(tok.text[1:])
        if tok.kind == "string":
            lexical = self._unescape_string(tok)
            datatype = None
            if self.peek().kind == "dtype":
                self.next()
                dtok = self.next()
                if dtok.kind == "iri":
                    datatype = self._read_iri_token(dtok)
                elif dtok.kind == "pname":
                    datatype = self._expand_pname(dtok)
                else:
                    raise self.error("expected datatype IRI", dtok)
            return Literal(lexical, datatype)
        raise self.error(f"expected a term, got {tok.text!r}", tok)

    # -- grammar --

    def parse_query(self) -> QueryAst:
        while self.at_keyword("PREFIX"):
            self.next()
            ptok = self.next()
            if ptok.kind != "pname" or not ptok.text.endswith(":"):
                raise self.error("expected prefix declaration like 'ex:'", ptok)
            itok = self.next()
            if itok.kind != "iri":
                raise self.error("expected IRI in prefix declaration", itok)
            self.prefixes[ptok.text[:-1]] = itok.text[1:-1]

        self.check_unsupported()
        self.expect_keyword("SELECT")
        distinct = False
        if self.at_keyword("DISTINCT"):
            self.next()
            distinct = True
        self.check_unsupported()

        select: list = []
        if self.peek().kind == "punct" and self.peek().text == "*":
            self.next()
            select = ["*"]
        else:
            while self.peek().kind == "var":
                select.append(self.next().text[1:])
            if not select:
                raise self.error("expected '*' or at least one ?variable")

        self.check_unsupported()
        self.expect_keyword("WHERE")
        where = self.parse_group()

        self.check_unsupported()
        tok = self.peek()
        if tok.kind != "eof":
            raise self.error(f"unexpected trailing {tok.text!r}")

        if select != ["*"]:
            in_where = self.peek_where_vars(where)
            for name in select:
                if name not in in_where:
                    raise SparqlError(f"selected variable ?{name} does not occur in WHERE")

        return QueryAst(
            select=tuple(select),
            where=where,
            distinct=distinct,
            prefixes=tuple(sorted(self.prefixes.items())),
        )

    @staticmethod
    def peek_where_vars(where: GroupPattern) -> set:
        return where.all_variables()

    def parse_group(self) -> GroupPattern:
        self.expect_punct("{")
        elements: list = []
        pending_dot_ok = False  # a '.' is allowed right after a triple pattern
        while True:
            self.check_unsupported()
            tok = self.peek()
            if tok.kind == "punct" and tok.text == "}":
                self.next()
                return GroupPattern(tuple(elements))
            if tok.kind == "punct" and tok.text == ".":
                if not pending_dot_ok:
                    raise self.error("unexpected '.'")
                self.next()
                pending_dot_ok = False
                continue
            if tok.kind == "eof":
                raise self.error("unexpected end of query inside group")
            if tok.kind == "punct" and tok.text == "{":
                elements.append(self.parse_union())
                pending_dot_ok = False
                continue
            if self.at_keyword("FILTER"):
                elements.append(self.parse_filter())
                pending_dot_ok = False
                continue
            if pending_dot_ok:
                raise self.error("expected '.' between triple patterns")
            elements.append(self.parse_triple_pattern())
            pending_dot_ok = True

    def parse_union(self) -> UnionPattern:
        left = self.parse_group()
        self.expect_keyword("UNION")
        node = UnionPattern(left, self.parse_group())
        while self.at_keyword("UNION"):
            self.next()
            node = UnionPattern(GroupPattern((node,)), self.parse_group())
        return node

    def parse_triple_pattern(self) -> TriplePattern:
        s = self.parse_term()
        p = self.parse_term()
        o = self.parse_term()
        try:
            return TriplePattern(s, p, o)
        except SparqlError as exc:
            raise self.error(str(exc)) from exc

    def parse_filter(self) -> GroupElement:
        self.expect_keyword("FILTER")
        if self.at_keyword("NOT"):
            self.next()
            if not self.at_keyword("EXISTS"):
                raise self.error("expected EXISTS after NOT")
            self.next()
            return FilterNotExists(self.parse_group())
        self.check_unsupported()
        self.expect_punct("(")
        lhs = self.parse_term()
        op_tok = self.next()
        if op_tok.kind == "neq":
            op = "!="
        elif op_tok.kind == "punct" and op_tok.text == "=":
            op = "="
        else:
            raise self.error("expected '=' or '!=' in FILTER", op_tok)
        rhs = self.parse_term()
        self.expect_punct(")")
        return FilterCompare(lhs, op, rhs)


def parse_query(text: str) -> QueryAst:
    """Parse SPARQL text within the supported subset into a QueryAst."""
    return _Parser(text).parse_query()


# --- evaluation ---------------------------------------------------------------

def _substitute(term: PatternTerm, sol: dict) -> PatternTerm:
    if isinstance(term, Variable):
        bound = sol.get(term.name)
        return term if bound is None else bound
    return term


def _match_one(pattern: TriplePattern, g: Graph, sol: dict) -> list:
    """All extensions of sol matching one pattern against the graph."""
    s, p, o = (_substitute(t, sol) for t in pattern.terms())
    out = []
    for triple in g:
        trial = None
        for want, have in ((s, triple.subject), (p, triple.predicate), (o, triple.object)):
            if isinstance(want, Variable):
                if trial is None:
                    trial = dict(sol)
                prev = trial.get(want.name)
                if prev is None:
                    trial[want.name] = have
                elif prev != have:
                    trial = False
                    break
            elif want != have:
                trial = False
                break
        if trial is False:
            continue
        out.append(trial if trial is not None else dict(sol))
    return out


def _boundness(pattern: TriplePattern, bound: set) -> int:
    n = 0
    for t in pattern.terms():
        if not isinstance(t, Variable) or t.name in bound:
            n += 1
    return n


def match_bgp(patterns: list, g: Graph, seed: Optional[dict] = None) -> list:
    """Join a basic graph pattern left to right, most-bound pattern first.

    Returns every extension of seed satisfying all patterns; the result set
    does not depend on the given pattern order.
    """
    sols = [dict(seed) if seed else {}]
    remaining = list(patterns)
    bound = set(sols[0])
    ordered = []
    while remaining:
        best = max(remaining, key=lambda tp: _boundness(tp, bound))
        remaining.remove(best)
        ordered.append(best)
        bound.update(t.name for t in best.terms() if isinstance(t, Variable))
    for tp in ordered:
        nxt = []
        for sol in sols:
            nxt.extend(_match_one(tp, g, sol))
        sols = nxt
        if not sols:
            break
    return sols


def _compatible(a: dict, b: dict) -> Optional[dict]:
    for k, v in b.items():
        if k in a and a[k] != v:
            return None
    merged = dict(a)
    merged.update(b)
    return merged


def _eval_group(group: GroupPattern, g: Graph, seed: dict) -> list:
    sols = [dict(seed)]
    filters = []
    i = 0
    elements = group.elements
    while i < len(elements):
        el = elements[i]
        if isinstance(el, TriplePattern):
            run = [el]
            while i + 1 < len(elements) and isinstance(elements[i + 1], TriplePattern):
                i += 1
                run.append(elements[i])
            nxt = []
            for sol in sols:
                nxt.extend(match_bgp(run, g, sol))
            sols = nxt
        elif isinstance(el, UnionPattern):
            branch = _eval_group(el.left, g, {}) + _eval_group(el.right, g, {})
            nxt = []
            for sol in sols:
                for b in branch:
                    merged = _compatible(sol, b)
                    if merged is not None:
                        nxt.append(merged)
            sols = nxt
        else:
            filters.append(el)
        i += 1
        if not sols:
            # Every filter keeps an empty solution set empty; stop early.
            return []
    for f in filters:
        if isinstance(f, FilterNotExists):
            sols = [s for s in sols if not _eval_group(f.inner, g, s)]
        else:
            sols = [s for s in sols if _compare_holds(f, s)]
    return sols


def _compare_holds(f: FilterCompare, sol: dict) -> bool:
    def resolve(t: PatternTerm):
        if isinstance(t, Variable):
            return sol.get(t.name)
        return t

    lhs = resolve(f.lhs)
    rhs = resolve(f.rhs)
    if lhs is None or rhs is None:
        return False
    return (lhs == rhs) if f.op == "=" else (lhs != rhs)


def evaluate(q: QueryAst, d: Dataset) -> BindingTable:
    """Evaluate a parsed query over the dataset's union-default view."""
    return evaluate_graph(q, d.union_view())


def evaluate_graph(q: QueryAst, g: Graph) -> BindingTable:
    """Evaluate over an already-materialized graph (a consistent snapshot)."""
    sols = _eval_group(q.where, g, {})
    columns = q.where.pattern_variables() if q.select_all else list(q.select)
    rows = [{v: s[v] for v in columns if v in s} for s in sols]
    if q.distinct:
        seen = set()
        deduped = []
        for r in rows:
            key = frozenset(r.items())
            if key not in seen:
                seen.add(key)
                deduped.append(r)
        rows = deduped
    return BindingTable(columns=columns, rows=rows)


# --- query text rendering -----------------------------------------------------

def _format_term(t: PatternTerm) -> str:
    if isinstance(t, Variable):
        return f"?{t.name}"
    if isinstance(t, Iri):
        return f"<{t.value}>"
    lex = t.lexical.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
    if t.datatype is None:
        return f'"{lex}"'
    return f'"{lex}"^^<{t.datatype.value}>'


def _format_group(group: GroupPattern) -> str:
    parts = []
    for el in group.elements:
        if isinstance(el, TriplePattern):
            parts.append(" ".join(_format_term(t) for t in el.terms()) + " .")
        elif isinstance(el, UnionPattern):
            parts.append(f"{_format_group(el.left)} UNION {_format_group(el.right)}")
        elif isinstance(el, FilterNotExists):
            parts.append(f"FILTER NOT EXISTS {_format_group(el.inner)}")
        else:
            parts.append(f"FILTER({_format_term(el.lhs)} {el.op} {_format_term(el.rhs)})")
    return "{ " + " ".join(parts) + " }" if parts else "{ }"


def format_query(q: QueryAst) -> str:
    """Render an AST back to parseable query text (prefixes are pre-expanded)."""
    head = "SELECT "
    if q.distinct:
        head += "DISTINCT "
    head += "*" if q.select_all else " ".join(f"?{v}" for v in q.select)
    return f"{head} WHERE {_format_group(q.where)}"
