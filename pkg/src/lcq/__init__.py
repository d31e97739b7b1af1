"""Lifecycle-query warehouse toolkit.

A linked-data warehouse kept current from tool services via a tracked
resource set (change-log) protocol, optionally complemented by MQTT push,
plus a simulated three-tool engineering toolchain and a benchmark harness
comparing direct-query, poll, and push synchronization.
"""

from lcq.rdfmodel import (
    Dataset,
    Graph,
    Iri,
    Literal,
    NTriplesParseError,
    Triple,
    Variable,
    parse_ntriples,
    serialize_ntriples,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "Graph",
    "Iri",
    "Literal",
    "NTriplesParseError",
    "Triple",
    "Variable",
    "parse_ntriples",
    "serialize_ntriples",
    "__version__",
]
