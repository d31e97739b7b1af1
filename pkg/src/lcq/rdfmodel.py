"""Minimal RDF data model: terms, triples, named-graph datasets, N-Triples.

Deliberately restricted: absolute IRIs and literals only (no blank nodes, no
language tags), so graph equality is plain set comparison and the canonical
N-Triples form is bit-exact. One resource occupies one named graph whose IRI
is the resource URI.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Union

_SCHEME_RE = re.compile(r"^[A-Za-z][A-Za-z0-9+.\-]*:")
# Characters that may not appear raw inside an IRIREF.
_IRI_FORBIDDEN = set('<>"{}|^`\\') | {chr(c) for c in range(0x21)}

_VARNAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class NTriplesParseError(ValueError):
    """Malformed N-Triples input; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True, order=True)
class Iri:
    """An absolute IRI (must carry a scheme; no characters illegal in IRIREF)."""

    value: str

    def __post_init__(self) -> None:
        if not _SCHEME_RE.match(self.value):
            raise ValueError(f"IRI is not absolute (missing scheme): {self.value!r}")
        bad = _IRI_FORBIDDEN.intersection(self.value)
        if bad:
            raise ValueError(f"IRI contains forbidden characters {sorted(bad)!r}: {self.value!r}")

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True, order=True)
class Literal:
    """A plain or datatyped literal (no language tags)."""

    lexical: str
    datatype: Optional[Iri] = None

    def __str__(self) -> str:
        if self.datatype is None:
            return f'"{self.lexical}"'
        return f'"{self.lexical}"^^{self.datatype}'


@dataclass(frozen=True, order=True)
class Variable:
    """A query variable; never appears inside a stored Graph."""

    name: str

    def __post_init__(self) -> None:
        if not _VARNAME_RE.match(self.name):
            raise ValueError(f"invalid variable name: {self.name!r}")

    def __str__(self) -> str:
        return f"?{self.name}"


Term = Union[Iri, Literal, Variable]


@dataclass(frozen=True, order=True)
class Triple:
    subject: Iri
    predicate: Iri
    object: Union[Iri, Literal]

    def __post_init__(self) -> None:
        if not isinstance(self.subject, Iri):
            raise TypeError(f"triple subject must be an Iri, got {type(self.subject).__name__}")
        if not isinstance(self.predicate, Iri):
            raise TypeError(f"triple predicate must be an Iri, got {type(self.predicate).__name__}")
        if not isinstance(self.object, (Iri, Literal)):
            raise TypeError(f"triple object must be an Iri or Literal, got {type(self.object).__name__}")


class Graph:
    """An immutable set of triples. Duplicates collapse; safely shareable."""

    __slots__ = ("_triples",)

    def __init__(self, triples: Iterable[Triple] = ()):
        self._triples = frozenset(triples)

    @property
    def triples(self) -> frozenset:
        return self._triples

    def __iter__(self) -> Iterator[Triple]:
        return iter(self._triples)

    def __len__(self) -> int:
        return len(self._triples)

    def __contains__(self, t: Triple) -> bool:
        return t in self._triples

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return self._triples == other._triples

    def __hash__(self) -> int:
        return hash(self._triples)

    def __repr__(self) -> str:
        return f"Graph({len(self._triples)} triples)"

    def union(self, other: "Graph") -> "Graph":
        return Graph(self._triples | other._triples)


EMPTY_GRAPH = Graph()


class Dataset:
    """Named graphs keyed by graph IRI, with a union-default view.

    One writer at a time; readers take consistent snapshots. All values
    handed out (Graph, snapshot dicts) are immutable or private copies.
    """

    def __init__(self) -> None:
        self._graphs: dict[Iri, Graph] = {}
        self._lock = threading.RLock()

    def upsert_graph(self, g_iri: Iri, g: Graph) -> None:
        """Replace (not merge) the graph stored under g_iri."""
        with self._lock:
            self._graphs[g_iri] = g

    def delete_graph(self, g_iri: Iri) -> None:
        """Remove g_iri; deleting an absent graph is a no-op."""
        with self._lock:
            self._graphs.pop(g_iri, None)

    def graph(self, g_iri: Iri) -> Optional[Graph]:
        with self._lock:
            return self._graphs.get(g_iri)

    def graph_iris(self) -> list:
        with self._lock:
            return sorted(self._graphs)

    def snapshot(self) -> dict:
        """Consistent point-in-time copy of the graph map."""
        with self._lock:
            return dict(self._graphs)

    def union_view(self) -> Graph:
        """The virtual graph equal to the union of all named graphs."""
        snap = self.snapshot()
        out: set = set()
        for g in snap.values():
            out |= g.triples
        return Graph(out)

    def __len__(self) -> int:
        with self._lock:
            return len(self._graphs)


# --- N-Triples ---------------------------------------------------------------

_ECHAR_DECODE = {"t": "\t", "b": "\b", "n": "\n", "r": "\r", "f": "\f", '"': '"', "'": "'", "\\": "\\"}


def _unescape(raw: str, line_no: int, what: str) -> str:
    out: list = []
    i = 0
    n = len(raw)
    while i < n:
        c = raw[i]
        if c != "\\":
            out.append(c)
            i += 1
            continue
        if i + 1 >= n:
            raise NTriplesParseError(line_no, f"dangling escape in {what}")
        e = raw[i + 1]
        if e in _ECHAR_DECODE:
            out.append(_ECHAR_DECODE[e])
            i += 2
        elif e == "u" or e == "U":
            width = 4 if e == "u" else 8
            hexdigits = raw[i + 2 : i + 2 + width]
            if len(hexdigits) != width or any(h not in "0123456789abcdefABCDEF" for h in hexdigits):
                raise NTriplesParseError(line_no, f"bad \\{e} escape in {what}")
            out.append(chr(int(hexdigits, 16)))
            i += 2 + width
        else:
            raise NTriplesParseError(line_no, f"unknown escape '\\{e}' in {what}")
    return "".join(out)


def _escape_literal(s: str) -> str:
    out: list = []
    for c in s:
        if c == "\\":
            out.append("\\\\")
        elif c == '"':
            out.append('\\"')
        elif c == "\n":
            out.append("\\n")
        elif c == "\r":
            out.append("\\r")
        elif c == "\t":
            out.append("\\t")
        elif ord(c) < 0x20:
            out.append(f"\\u{ord(c):04X}")
        else:
            out.append(c)
    return "".join(out)


class _LineScanner:
    """Cursor over one N-Triples line."""

    def __init__(self, line: str, line_no: int):
        self.line = line
        self.pos = 0
        self.line_no = line_no

    def error(self, message: str) -> NTriplesParseError:
        return NTriplesParseError(self.line_no, f"{message} (column {self.pos + 1})")

    def skip_ws(self) -> None:
        while self.pos < len(self.line) and self.line[self.pos] in " \t":
            self.pos += 1

    def at_end(self) -> bool:
        return self.pos >= len(self.line)

    def peek(self) -> str:
        return self.line[self.pos] if self.pos < len(self.line) else ""

    def expect(self, ch: str) -> None:
        if self.peek() != ch:
            raise self.error(f"expected {ch!r}")
        self.pos += 1

    def read_iri(self) -> Iri:
        self.expect("<")
        end = self.line.find(">", self.pos)
        if end < 0:
            raise self.error("unterminated IRI")
        raw = self.line[self.pos : end]
        self.pos = end + 1
        value = _unescape(raw, self.line_no, "IRI")
        try:
            return Iri(value)
        except ValueError as exc:
            raise NTriplesParseError(self.line_no, str(exc)) from exc

    def read_literal(self) -> Literal:
        self.expect('"')
        # Find the closing quote, honouring backslash escapes.
        i = self.pos
        line = self.line
        while True:
            if i >= len(line):
                raise self.error("unterminated literal")
            c = line[i]
            if c == "\\":
                i += 2
                continue
            if c == '"':
                break
            i += 1
        raw = line[self.pos : i]
        self.pos = i + 1
        lexical = _unescape(raw, self.line_no, "literal")
        datatype = None
        if self.line.startswith("^^", self.pos):
            self.pos += 2
            datatype = self.read_iri()
        return Literal(lexical, datatype)

    def read_term(self, position: str) -> Union[Iri, Literal]:
        c = self.peek()
        if c == "<":
            return self.read_iri()
        if c == '"':
            if position != "object":
                raise self.error(f"literal not allowed as {position}")
            return self.read_literal()
        if c == "_":
            raise NTriplesParseError(self.line_no, "blank nodes unsupported")
        if c == "":
            raise self.error(f"missing {position}")
        raise self.error(f"unexpected character {c!r}")


def parse_ntriples(text: str) -> Graph:
    """Parse N-Triples text (IRIs and plain/typed literals only) into a Graph.

    Blank lines and full-line comments are skipped; duplicate statements
    collapse. Raises NTriplesParseError with a line number on bad input,
    including any blank-node token.
    """
    triples: set = set()
    for line_no, line in enumerate(text.split("\n"), start=1):
        sc = _LineScanner(line, line_no)
        sc.skip_ws()
        if sc.at_end() or sc.peek() == "#":
            continue
        subject = sc.read_term("subject")
        sc.skip_ws()
        predicate = sc.read_term("predicate")
        if not isinstance(predicate, Iri):
            raise sc.error("predicate must be an IRI")
        sc.skip_ws()
        obj = sc.read_term("object")
        sc.skip_ws()
        sc.expect(".")
        sc.skip_ws()
        if not sc.at_end() and sc.peek() != "#":
            raise sc.error("trailing content after '.'")
        triples.add(Triple(subject, predicate, obj))
    return Graph(triples)


def serialize_term(term: Union[Iri, Literal]) -> str:
    if isinstance(term, Iri):
        return f"<{term.value}>"
    if isinstance(term, Literal):
        lex = _escape_literal(term.lexical)
        if term.datatype is None:
            return f'"{lex}"'
        return f'"{lex}"^^<{term.datatype.value}>'
    raise TypeError(f"cannot serialize {type(term).__name__}")


def serialize_ntriples(g: Graph) -> str:
    """Canonical N-Triples: one statement per line, lines sorted, '\\n' endings.

    parse_ntriples(serialize_ntriples(g)) == g, and serialized forms are
    equal iff the graphs are equal.
    """
    lines = [
        f"{serialize_term(t.subject)} {serialize_term(t.predicate)} {serialize_term(t.object)} ."
        for t in g
    ]
    lines.sort()
    return "".join(line + "\n" for line in lines)
