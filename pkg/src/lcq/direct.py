"""Direct-query baseline: answer lifecycle queries by crawling the services.

No local store: every query enumerates each service's live resources (TRS
base plus post-cutoff change events), fetches every one of them, and
filters the assembled triples in memory.  This is the architecture the
warehouse replaces, kept here so benchmarks can count what it costs.
Every resource GET is counted per service.
"""

from __future__ import annotations

from typing import Iterable, Optional

import httpx

from .queries import canned_query, query_variable
from .rdfmodel import Graph, parse_ntriples
from .sparql import evaluate_graph, parse_query
from .trs_server import ChangeKind


class DirectQueryError(RuntimeError):
    """A service could not be crawled; the message names it."""


class DirectClient:
    """Per-query crawler over TRS-exposed services.

    `servers` is an iterable of objects with server_id and trs_url
    (ServerConfig works).  Results match the warehouse's at quiescence
    because both run the same query text, one over crawled triples, one
    over synced ones.
    """

    def __init__(self, http: httpx.Client, servers: Iterable):
        self._http = http
        self.servers = list(servers)
        self.resource_get_count: dict = {s.server_id: 0 for s in self.servers}
        self.trs_get_count: dict = {s.server_id: 0 for s in self.servers}

    # -- crawling --

    def _get_json(self, server_id: str, url: str) -> dict:
        try:
            response = self._http.get(url)
        except httpx.RequestError as exc:
            raise DirectQueryError(f"service {server_id} unreachable: {exc}") from exc
        if response.status_code != 200:
            raise DirectQueryError(
                f"service {server_id} returned {response.status_code} for {url}"
            )
        self.trs_get_count[server_id] += 1
        return response.json()

    def _live_uris(self, server) -> set:
        """Base members adjusted by post-cutoff creations/deletions."""
        doc = self._get_json(server.server_id, server.trs_url)
        cutoff = doc["cutoffOrder"]
        live = set()
        page_url = doc["base"]
        while page_url:
            page = self._get_json(server.server_id, page_url)
            live.update(page["base"])
            page_url = page["next"]
        events = []
        page_url = doc["changeLog"]
        while page_url:
            page = self._get_json(server.server_id, page_url)
            stop = False
            for entry in page["changeLog"]:  # newest first
                if entry["order"] <= cutoff:
                    stop = True
                    break
                events.append(entry)
            if stop:
                break
            page_url = page["next"]
        for entry in sorted(events, key=lambda e: e["order"]):
            if entry["kind"] == ChangeKind.DELETION.value:
                live.discard(entry["uri"])
            else:
                live.add(entry["uri"])
        return live

    def _fetch_graph(self, server_id: str, uri: str) -> Optional[Graph]:
        try:
            response = self._http.get(uri)
        except httpx.RequestError as exc:
            raise DirectQueryError(f"service {server_id} unreachable: {exc}") from exc
        self.resource_get_count[server_id] += 1
        if response.status_code == 404:
            return None  # deleted while crawling
        if response.status_code != 200:
            raise DirectQueryError(
                f"service {server_id} returned {response.status_code} for {uri}"
            )
        return parse_ntriples(response.text)

    def crawl_union(self) -> Graph:
        """Fetch every live resource on every service into one graph."""
        triples = set()
        for server in self.servers:
            for uri in sorted(self._live_uris(server)):
                graph = self._fetch_graph(server.server_id, uri)
                if graph is not None:
                    triples.update(graph.triples)
        return Graph(triples)

    # -- queries --

    def run(self, name: str, cr_iri: str = None, r_iri: str = None) -> dict:
        """One canned query: crawl, filter in memory, return results JSON."""
        query = parse_query(canned_query(name, cr_iri, r_iri))
        return evaluate_graph(query, self.crawl_union()).to_json_dict()

    def run_values(self, name: str, cr_iri: str = None, r_iri: str = None) -> set:
        results = self.run(name, cr_iri, r_iri)
        var = query_variable(name)
        return {b[var]["value"] for b in results["results"]["bindings"]}

    def get_total(self) -> int:
        return sum(self.resource_get_count.values())
