"""Mock toolchain: three linked-data services, a fixture seeder, a workload driver.

The services stand in for a requirements tool, a design tool, and a change
management tool. Each one hosts typed resources with cross-service
traceability links, serves them as N-Triples, and embeds a TrsServer so
every mutation lands in a change log (and, when a publisher is attached,
on the push channel).
"""

from __future__ import annotations

import json
import random
import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional
from urllib.parse import parse_qs

from lcq.httpserve import not_found, respond
from lcq.rdfmodel import Graph, Iri, Literal, Triple, serialize_ntriples
from lcq.trs_server import ChangeEvent, ChangeKind, TrsServer, now_ms

TC = "http://example.org/toolchain#"
RDF_TYPE = "http://www.w3.org/1999/02/22-rdf-syntax-ns#type"
DCTERMS_TITLE = "http://purl.org/dc/terms/title"

TC_REQUIREMENT = TC + "Requirement"
TC_SIMULINK_BLOCK = TC + "SimulinkBlock"
TC_CHANGE_REQUEST = TC + "ChangeRequest"
TC_STATUS = TC + "status"
TC_SATISFIES = TC + "satisfies"
TC_REFINES = TC + "refines"
TC_TRACKS = TC + "tracks"

REQUIREMENT_STATUSES = ("APPROVED", "DRAFT")
CHANGE_REQUEST_STATUSES = ("OPEN", "RESOLVED")


@dataclass(frozen=True)
class ToolResource:
    uri: str
    rdf_type: str
    title: str
    status: Optional[str] = None
    links: tuple = ()  # ((predicate IRI, target resource URI), ...)

    def to_graph(self) -> Graph:
        subject = Iri(self.uri)
        triples = [
            Triple(subject, Iri(RDF_TYPE), Iri(self.rdf_type)),
            Triple(subject, Iri(DCTERMS_TITLE), Literal(self.title)),
        ]
        if self.status is not None:
            triples.append(Triple(subject, Iri(TC_STATUS), Literal(self.status)))
        for predicate, target in self.links:
            triples.append(Triple(subject, Iri(predicate), Iri(target)))
        return Graph(triples)


class ToolService:
    """One mock linked-data service: resource store + TRS server + HTTP app.

    Mutations are serialized by a lock; the change event is recorded and
    handed to the publisher (which must only enqueue) before the lock is
    released, so publish order always matches log order.
    """

    def __init__(
        self,
        server_id: str,
        resource_prefix: Optional[str] = None,
        page_size: int = 50,
        rebase_every: int = 0,
        publisher: Optional[Callable[[ChangeEvent], None]] = None,
    ):
        self.server_id = server_id
        self.resource_prefix = (resource_prefix or f"http://{server_id}.tc.example").rstrip("/")
        self.trs = TrsServer(
            server_id,
            base_url=self.resource_prefix,
            page_size=page_size,
            rebase_every=rebase_every,
            live_provider=self.live_uris,
        )
        self.publisher = publisher
        self._resources: dict = {}
        self._lock = threading.RLock()
        self.resource_get_count = 0  # GETs under /resources/, 404s included
        self.trs_get_count = 0  # GETs under /trs

    # -- resource identity --

    def uri_for(self, local_id: str) -> str:
        return f"{self.resource_prefix}/resources/{local_id}"

    @property
    def trs_url(self) -> str:
        return f"{self.resource_prefix}/trs"

    # -- mutations --

    def _record(self, uri: str, kind: ChangeKind, ts: Optional[int]) -> ChangeEvent:
        event = self.trs.record_change(uri, kind, ts)
        if self.publisher is not None:
            self.publisher(event)
        return event

    def create_resource(self, resource: ToolResource, ts: Optional[int] = None) -> ChangeEvent:
        with self._lock:
            if resource.uri in self._resources:
                raise ValueError(f"resource already exists: {resource.uri}")
            self._resources[resource.uri] = resource
            return self._record(resource.uri, ChangeKind.CREATION, ts)

    def modify_resource(self, resource: ToolResource, ts: Optional[int] = None) -> ChangeEvent:
        with self._lock:
            if resource.uri not in self._resources:
                raise ValueError(f"resource does not exist: {resource.uri}")
            self._resources[resource.uri] = resource
            return self._record(resource.uri, ChangeKind.MODIFICATION, ts)

    def delete_resource(self, uri: str, ts: Optional[int] = None) -> ChangeEvent:
        with self._lock:
            if uri not in self._resources:
                raise ValueError(f"resource does not exist: {uri}")
            del self._resources[uri]
            return self._record(uri, ChangeKind.DELETION, ts)

    # -- reads --

    def get_resource(self, uri: str) -> Optional[ToolResource]:
        with self._lock:
            return self._resources.get(uri)

    def live_uris(self) -> set:
        with self._lock:
            return set(self._resources)

    def live_graphs(self) -> dict:
        """Ground truth for oracles: Iri -> Graph of every live resource."""
        with self._lock:
            return {Iri(uri): r.to_graph() for uri, r in self._resources.items()}

    # -- HTTP surface --

    def wsgi_app(self, environ, start_response):
        path = environ.get("PATH_INFO", "")
        if environ.get("REQUEST_METHOD") != "GET":
            return respond(start_response, "405 Method Not Allowed", "GET only", "text/plain")
        if path.startswith("/resources/"):
            with self._lock:
                self.resource_get_count += 1
                resource = self._resources.get(self.uri_for(path[len("/resources/"):]))
            if resource is None:
                return not_found(start_response)
            return respond(
                start_response,
                "200 OK",
                serialize_ntriples(resource.to_graph()),
                "application/n-triples",
                extra_headers=[("Cache-Control", "max-age=0")],
            )
        if path.startswith("/trs"):
            with self._lock:
                self.trs_get_count += 1
            query = parse_qs(environ.get("QUERY_STRING", ""))
            try:
                page = int(query.get("page", ["0"])[0])
            except ValueError:
                return respond(start_response, "400 Bad Request", "bad page", "text/plain")
            if path == "/trs":
                doc = self.trs.document()
            elif path == "/trs/base":
                doc = self.trs.base_page(page)
            elif path == "/trs/changelog":
                doc = self.trs.changelog_page(page)
            else:
                return not_found(start_response)
            return respond(start_response, "200 OK", json.dumps(doc), "application/json")
        return not_found(start_response)


# --- fixture -------------------------------------------------------------------

@dataclass(frozen=True)
class FixtureSpec:
    """Counts plus an explicit link plan; the default is the canonical fixture."""

    seed: int = 42
    requirements: int = 5
    blocks: int = 4
    change_requests: int = 3
    refines: tuple = (("R2", "R1"), ("R1", "R4"))
    satisfies: tuple = (("B1", "R1"), ("B2", "R2"))
    tracks: tuple = (("CR1", "R1"), ("CR2", "R2"), ("CR3", "R4"))


CANONICAL_FIXTURE = FixtureSpec()

SERVICE_IDS = ("reqs", "design", "cm")


def make_services(publisher_for=None, page_size: int = 50, rebase_every: int = 0) -> dict:
    """The standard three-service toolchain, keyed by server id."""
    services = {}
    for sid in SERVICE_IDS:
        publisher = publisher_for(sid) if publisher_for else None
        services[sid] = ToolService(
            sid, page_size=page_size, rebase_every=rebase_every, publisher=publisher
        )
    return services


def seed_fixture(spec: FixtureSpec, services: dict, ts: Optional[int] = None) -> dict:
    """Populate the services deterministically; returns uri -> ToolResource."""
    rng = random.Random(spec.seed)
    reqs, design, cm = services["reqs"], services["design"], services["cm"]
    created: dict = {}
    ts = now_ms() if ts is None else ts

    def local(pairs, key):
        return tuple(p for p in pairs if p[0] == key)

    for i in range(1, spec.requirements + 1):
        rid = f"R{i}"
        links = tuple(
            (TC_REFINES, reqs.uri_for(target)) for _, target in local(spec.refines, rid)
        )
        resource = ToolResource(
            uri=reqs.uri_for(rid),
            rdf_type=TC_REQUIREMENT,
            title=f"Requirement {rid}",
            status=rng.choice(REQUIREMENT_STATUSES),
            links=links,
        )
        reqs.create_resource(resource, ts)
        created[resource.uri] = resource

    for i in range(1, spec.blocks + 1):
        bid = f"B{i}"
        links = tuple(
            (TC_SATISFIES, reqs.uri_for(target)) for _, target in local(spec.satisfies, bid)
        )
        resource = ToolResource(
            uri=design.uri_for(bid),
            rdf_type=TC_SIMULINK_BLOCK,
            title=f"Block {bid}",
            links=links,
        )
        design.create_resource(resource, ts)
        created[resource.uri] = resource

    for i in range(1, spec.change_requests + 1):
        cid = f"CR{i}"
        links = tuple(
            (TC_TRACKS, reqs.uri_for(target)) for _, target in local(spec.tracks, cid)
        )
        resource = ToolResource(
            uri=cm.uri_for(cid),
            rdf_type=TC_CHANGE_REQUEST,
            title=f"Change Request {cid}",
            status=rng.choice(CHANGE_REQUEST_STATUSES),
            links=links,
        )
        cm.create_resource(resource, ts)
        created[resource.uri] = resource

    return created


# --- workload ------------------------------------------------------------------

TYPE_TO_SERVICE = {
    TC_REQUIREMENT: "reqs",
    TC_SIMULINK_BLOCK: "design",
    TC_CHANGE_REQUEST: "cm",
}

DEFAULT_OP_WEIGHTS = {"create": 1.0, "modify": 4.0, "delete": 1.0}


@dataclass(frozen=True)
class WorkloadScript:
    seed: int = 1
    steps: int = 100
    rate: float = 0.0  # ops per second; 0 means unpaced
    weights: dict = field(
        default_factory=lambda: {t: dict(DEFAULT_OP_WEIGHTS) for t in TYPE_TO_SERVICE}
    )
    link_probability: float = 0.4

    def __post_init__(self) -> None:
        total = sum(w for ops in self.weights.values() for w in ops.values())
        if total <= 0 or any(
            w < 0 for ops in self.weights.values() for w in ops.values()
        ):
            raise ValueError("op weights must be >= 0 with at least one positive")


class _WorkloadState:
    """Driver-side registry of live resources, split by type."""

    def __init__(self, services: dict, fixture: dict):
        self.services = services
        self.by_type: dict = {t: {} for t in TYPE_TO_SERVICE}
        for uri, resource in fixture.items():
            self.by_type[resource.rdf_type][uri] = resource
        self.counters = {t: 0 for t in TYPE_TO_SERVICE}

    def live(self, rdf_type: str) -> list:
        return sorted(self.by_type[rdf_type])


def _new_resource(rng, state: _WorkloadState, rdf_type: str, link_probability: float) -> ToolResource:
    service = state.services[TYPE_TO_SERVICE[rdf_type]]
    state.counters[rdf_type] += 1
    n = state.counters[rdf_type]
    requirements = state.live(TC_REQUIREMENT)
    links: list = []
    if rdf_type == TC_REQUIREMENT:
        local_id, title, status = f"WR{n}", f"Requirement WR{n}", rng.choice(REQUIREMENT_STATUSES)
        if requirements and rng.random() < link_probability:
            links.append((TC_REFINES, rng.choice(requirements)))
    elif rdf_type == TC_SIMULINK_BLOCK:
        local_id, title, status = f"WB{n}", f"Block WB{n}", None
        if requirements and rng.random() < link_probability:
            links.append((TC_SATISFIES, rng.choice(requirements)))
    else:
        local_id, title, status = f"WCR{n}", f"Change Request WCR{n}", rng.choice(
            CHANGE_REQUEST_STATUSES
        )
        targets = requirements + state.live(TC_SIMULINK_BLOCK)
        if targets and rng.random() < link_probability:
            links.append((TC_TRACKS, rng.choice(targets)))
    return ToolResource(
        uri=service.uri_for(local_id),
        rdf_type=rdf_type,
        title=title,
        status=status,
        links=tuple(links),
    )


def _modified_copy(rng, resource: ToolResource) -> ToolResource:
    revision = rng.randrange(1_000_000)
    title = resource.title.split(" rev ")[0] + f" rev {revision}"
    status = resource.status
    if status is not None and rng.random() < 0.5:
        pool = REQUIREMENT_STATUSES if resource.rdf_type == TC_REQUIREMENT else CHANGE_REQUEST_STATUSES
        status = rng.choice(pool)
    return replace(resource, title=title, status=status)


def run_workload(script: WorkloadScript, services: dict, fixture: dict) -> list:
    """Execute the scripted mutations; returns the log [(op, uri, ts), ...].

    The ts in each entry is the exact timestamp passed to record_change, so
    staleness oracles can align warehouse samples with ground truth. Deletes
    and modifies only ever target currently-live resources.
    """
    rng = random.Random(script.seed)
    state = _WorkloadState(services, fixture)
    choices = [
        (rdf_type, op, weight)
        for rdf_type, ops in sorted(script.weights.items())
        for op, weight in sorted(ops.items())
        if weight > 0
    ]
    weights = [c[2] for c in choices]
    log: list = []
    started = time.monotonic()
    for step in range(script.steps):
        if script.rate > 0:
            target = started + step / script.rate
            delay = target - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        rdf_type, op, _ = rng.choices(choices, weights=weights)[0]
        service = state.services[TYPE_TO_SERVICE[rdf_type]]
        live = state.live(rdf_type)
        ts = now_ms()
        if op != "create" and not live:
            op = "create"
        if op == "create":
            resource = _new_resource(rng, state, rdf_type, script.link_probability)
            service.create_resource(resource, ts)
            state.by_type[rdf_type][resource.uri] = resource
            log.append(("create", resource.uri, ts))
        elif op == "modify":
            uri = rng.choice(live)
            resource = _modified_copy(rng, state.by_type[rdf_type][uri])
            service.modify_resource(resource, ts)
            state.by_type[rdf_type][uri] = resource
            log.append(("modify", uri, ts))
        else:
            uri = rng.choice(live)
            service.delete_resource(uri, ts)
            del state.by_type[rdf_type][uri]
            log.append(("delete", uri, ts))
    return log


def union_live_graphs(services: dict) -> dict:
    """Iri -> Graph across every service; the convergence ground truth."""
    union: dict = {}
    for service in services.values():
        union.update(service.live_graphs())
    return union
