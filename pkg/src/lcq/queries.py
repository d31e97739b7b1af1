"""The three canned lifecycle queries, rendered as SPARQL text.

lcq1: Simulink blocks not linked to any requirement.
lcq2: change requests affected by a change to a given requirement — those
      tracking a requirement one `refines` hop away from it, in either
      direction, excluding the change request already linked to it.
lcq3: blocks and requirements not covered by any change request, directly
      or (for blocks) through a requirement they satisfy.
"""

from __future__ import annotations

PREFIXES = (
    "PREFIX rdf: <http://www.w3.org/1999/02/22-rdf-syntax-ns#>\n"
    "PREFIX tc: <http://example.org/toolchain#>\n"
)

LCQ1_TEXT = PREFIXES + (
    "SELECT ?b WHERE {\n"
    "  ?b rdf:type tc:SimulinkBlock .\n"
    "  FILTER NOT EXISTS { ?b tc:satisfies ?r }\n"
    "}\n"
)

LCQ3_TEXT = PREFIXES + (
    "SELECT ?m WHERE {\n"
    "  { ?m rdf:type tc:SimulinkBlock } UNION { ?m rdf:type tc:Requirement }\n"
    "  FILTER NOT EXISTS {\n"
    "    { ?cr tc:tracks ?m } UNION { ?m tc:satisfies ?r . ?cr tc:tracks ?r }\n"
    "  }\n"
    "}\n"
)


def lcq2_text(cr_iri: str, r_iri: str) -> str:
    if not cr_iri or not r_iri:
        raise ValueError("lcq2 needs a change-request IRI and a requirement IRI")
    return PREFIXES + (
        "SELECT ?cr WHERE {\n"
        f"  {{ ?rx tc:refines <{r_iri}> . ?cr tc:tracks ?rx }}\n"
        f"  UNION {{ <{r_iri}> tc:refines ?ry . ?cr tc:tracks ?ry }}\n"
        f"  FILTER(?cr != <{cr_iri}>)\n"
        "}\n"
    )


QUERY_NAMES = ("lcq1", "lcq2", "lcq3")


def canned_query(name: str, cr_iri: str = None, r_iri: str = None) -> str:
    if name == "lcq1":
        return LCQ1_TEXT
    if name == "lcq2":
        return lcq2_text(cr_iri, r_iri)
    if name == "lcq3":
        return LCQ3_TEXT
    raise ValueError(f"unknown query name: {name}")


def query_variable(name: str) -> str:
    """The single projected variable of a canned query."""
    variables = {"lcq1": "b", "lcq2": "cr", "lcq3": "m"}
    if name not in variables:
        raise ValueError(f"unknown query name: {name}")
    return variables[name]
