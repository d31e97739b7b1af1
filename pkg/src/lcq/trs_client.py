"""TRS sync client: initial base sync, incremental polling, compaction, apply.

The client mirrors one tracked resource set into a Dataset. It first loads
the base snapshot plus post-cutoff events, then stays current either by
periodic change-log polls or by having pushed events handed to it. Event
windows are compacted so each resource is fetched at most once per window:
create+...+delete collapses to nothing, any other trailing delete becomes
a graph delete, everything else becomes one fetch of the current state.
"""

from __future__ import annotations

import time
from contextlib import nullcontext
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import httpx

from lcq.rdfmodel import Dataset, Graph, Iri, NTriplesParseError, parse_ntriples
from lcq.trs_server import ChangeEvent, ChangeKind, now_ms


class SyncPhase(Enum):
    INITIAL = "Initial"
    INCREMENTAL = "Incremental"


@dataclass
class SyncState:
    server_id: str
    trs_url: str
    last_applied_order: int = 0
    phase: SyncPhase = SyncPhase.INITIAL

    def advance(self, order: int) -> None:
        # last_applied_order never decreases, so duplicate deliveries are inert
        if order > self.last_applied_order:
            self.last_applied_order = order


class ActionKind(Enum):
    FETCH_AND_UPSERT = "FetchAndUpsert"
    DELETE_GRAPH = "DeleteGraph"
    SKIP = "Skip"


@dataclass(frozen=True)
class EffectiveAction:
    uri: str
    action: ActionKind
    max_order: int  # largest event order folded into this action
    event_ts: int  # ts of that newest folded event, for staleness sampling


class LogTruncatedError(RuntimeError):
    """The server's change log no longer covers this client's position."""


class FetchError(RuntimeError):
    pass


def compact(events: list) -> list:
    """Fold an ascending event window into at most one action per resource.

    A resource whose window starts with Creation and ends with Deletion
    never existed outside the window, so nothing is done for it at all.
    Any other trailing Deletion deletes the graph; otherwise the current
    state is fetched once, regardless of how many events piled up.
    """
    previous_order = 0
    window: dict = {}  # uri -> [first kind, last kind, last order, last ts]
    for e in events:
        if e.order <= previous_order:
            raise ValueError(
                f"event orders must be strictly ascending ({e.order} after {previous_order})"
            )
        previous_order = e.order
        entry = window.get(e.uri)
        if entry is None:
            window[e.uri] = [e.kind, e.kind, e.order, e.ts]
        else:
            entry[1], entry[2], entry[3] = e.kind, e.order, e.ts

    actions = []
    for uri, (first, last, order, ts) in window.items():
        if last is ChangeKind.DELETION and first is ChangeKind.CREATION:
            kind = ActionKind.SKIP
        elif last is ChangeKind.DELETION:
            kind = ActionKind.DELETE_GRAPH
        else:
            kind = ActionKind.FETCH_AND_UPSERT
        actions.append(EffectiveAction(uri, kind, order, ts))
    actions.sort(key=lambda a: a.max_order)
    return actions


@dataclass(frozen=True)
class Resolver:
    """Rewrites logical service URLs to the address the service listens on.

    Services mint resource and TRS-page URLs under a stable logical prefix
    (http://reqs.tc.example/...); when the service is actually bound to a
    socket, the prefix differs. The identity resolver leaves URLs alone.
    """

    logical_prefix: str = ""
    physical_prefix: str = ""

    def resolve(self, url: str) -> str:
        if self.logical_prefix and url.startswith(self.logical_prefix):
            return self.physical_prefix + url[len(self.logical_prefix):]
        return url


class SyncHooks:
    """Observation points for metrics; the default implementation ignores all."""

    def on_fetch(self, server_id: str, uri: str) -> None:
        pass

    def on_apply(self, server_id: str, action: EffectiveAction, apply_ts: int) -> None:
        pass

    def on_dirty(self, server_id: str, uri: str, error: Exception) -> None:
        pass

    def on_dirty_resolved(self, server_id: str, uri: str) -> None:
        pass


@dataclass
class _DirtyEntry:
    attempts: int
    not_before: float  # monotonic seconds


class TrsSyncClient:
    """Sync pipeline for one server; all writes go to the given dataset.

    apply_lock, when provided, is held across each whole action batch so
    readers sharing the lock never observe a half-applied batch.
    """

    def __init__(
        self,
        http: httpx.Client,
        server_id: str,
        trs_url: str,
        dataset: Dataset,
        resolver: Optional[Resolver] = None,
        hooks: Optional[SyncHooks] = None,
        fetch_attempts: int = 3,
        fetch_backoff_ms: int = 100,
        dirty_backoff_ms: int = 1000,
        dirty_backoff_max_ms: int = 60000,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.http = http
        self.dataset = dataset
        self.resolver = resolver or Resolver()
        self.hooks = hooks or SyncHooks()
        self.state = SyncState(server_id=server_id, trs_url=trs_url)
        self.fetch_attempts = fetch_attempts
        self.fetch_backoff_ms = fetch_backoff_ms
        self.dirty_backoff_ms = dirty_backoff_ms
        self.dirty_backoff_max_ms = dirty_backoff_max_ms
        self.sleep = sleep
        self.apply_lock = nullcontext()
        self.dirty: dict = {}  # uri -> _DirtyEntry
        # graph URIs this client has put into the dataset; initial_sync uses
        # it to drop graphs the server no longer has (the dataset is shared,
        # so it must never touch other servers' graphs)
        self.owned: set = set()

    # -- HTTP helpers --

    def _get(self, url: str) -> httpx.Response:
        return self.http.get(self.resolver.resolve(url))

    def _get_json(self, url: str) -> dict:
        last_error: Optional[Exception] = None
        for attempt in range(self.fetch_attempts):
            try:
                resp = self._get(url)
                if resp.status_code == 200:
                    return resp.json()
                last_error = FetchError(f"GET {url} -> {resp.status_code}")
            except httpx.RequestError as exc:
                last_error = exc
            self.sleep(self.fetch_backoff_ms * (2 ** attempt) / 1000)
        raise FetchError(f"GET {url} failed after {self.fetch_attempts} attempts") from last_error

    def _fetch_resource(self, uri: str) -> Optional[Graph]:
        """Current body of a resource, or None if the server says it is gone."""
        last_error: Optional[Exception] = None
        for attempt in range(self.fetch_attempts):
            try:
                resp = self._get(uri)
                self.hooks.on_fetch(self.state.server_id, uri)
                if resp.status_code == 404:
                    return None
                if resp.status_code == 200:
                    return parse_ntriples(resp.text)
                last_error = FetchError(f"GET {uri} -> {resp.status_code}")
            except (httpx.RequestError, NTriplesParseError) as exc:
                last_error = exc
            self.sleep(self.fetch_backoff_ms * (2 ** attempt) / 1000)
        raise FetchError(f"GET {uri} failed after {self.fetch_attempts} attempts") from last_error

    # -- page walking --

    def _walk_base(self, first_page_url: str) -> list:
        members, url = [], first_page_url
        while url:
            page = self._get_json(url)
            members.extend(page["base"])
            url = page["next"]
        return members

    def _collect_events_after(self, first_page_url: str, floor: int) -> list:
        """Events with order > floor, ascending, walked newest-first with dedupe."""
        by_order: dict = {}
        url = first_page_url
        while url:
            page = self._get_json(url)
            stop = False
            for d in page["changeLog"]:
                e = ChangeEvent.from_json_dict(d)
                if e.order <= floor:
                    stop = True
                    break
                by_order[e.order] = e
            url = None if stop else page["next"]
        return [by_order[o] for o in sorted(by_order)]

    # -- the three client responsibilities --

    def initial_sync(self) -> SyncState:
        """Load base members, then compact and apply post-cutoff events."""
        for _ in range(5):
            doc = self._get_json(self.state.trs_url)
            cutoff = doc["cutoffOrder"]
            members = self._walk_base(doc["base"])
            events = self._collect_events_after(doc["changeLog"], cutoff)
            if self._get_json(self.state.trs_url)["cutoffOrder"] == cutoff:
                break
        else:
            raise LogTruncatedError(
                f"{self.state.server_id}: cutoff kept moving during initial sync"
            )

        # resources we hold that are in neither the base nor the surviving
        # events were deleted before the cutoff: drop them, or a client
        # recovering from a truncated log resurrects them forever
        expected = set(members)
        for e in events:
            if e.kind is ChangeKind.DELETION:
                expected.discard(e.uri)
            else:
                expected.add(e.uri)
        stale = self.owned - expected

        staged = []
        for uri in members:
            try:
                g = self._fetch_resource(uri)
            except FetchError as exc:
                self._mark_dirty(uri, exc)
                continue
            if g is not None:  # 404 here means a post-snapshot deletion; replay covers it
                staged.append((uri, g))
        with self.apply_lock:
            for uri in stale:
                self.dataset.delete_graph(Iri(uri))
                self.owned.discard(uri)
            for uri, g in staged:
                self.dataset.upsert_graph(Iri(uri), g)
                self.owned.add(uri)

        self.state.advance(cutoff)
        self.apply_actions(compact(events))
        self.state.phase = SyncPhase.INCREMENTAL
        return self.state

    def poll_once(self) -> list:
        """Exactly the not-yet-applied events, oldest first.

        Raises LogTruncatedError when the server has rebased past this
        client's position; the caller must re-run initial_sync.
        """
        doc = self._get_json(self.state.trs_url)
        floor = self.state.last_applied_order
        if doc["cutoffOrder"] > floor:
            raise LogTruncatedError(
                f"{self.state.server_id}: log truncated at {doc['cutoffOrder']}, "
                f"client at {floor}"
            )
        events = self._collect_events_after(doc["changeLog"], floor)
        if events:
            got = [e.order for e in events]
            if got != list(range(floor + 1, events[-1].order + 1)):
                raise LogTruncatedError(
                    f"{self.state.server_id}: change log has gaps after {floor}"
                )
        return events

    def apply_actions(self, actions: list) -> None:
        """Run compacted actions against the dataset, in max_order order."""
        with self.apply_lock:
            for action in actions:
                if action.action is ActionKind.FETCH_AND_UPSERT:
                    try:
                        g = self._fetch_resource(action.uri)
                    except FetchError as exc:
                        self._mark_dirty(action.uri, exc)
                        self.state.advance(action.max_order)
                        continue
                    if g is None:
                        self.dataset.delete_graph(Iri(action.uri))
                        self.owned.discard(action.uri)
                    else:
                        self.dataset.upsert_graph(Iri(action.uri), g)
                        self.owned.add(action.uri)
                elif action.action is ActionKind.DELETE_GRAPH:
                    self.dataset.delete_graph(Iri(action.uri))
                    self.owned.discard(action.uri)
                self.state.advance(action.max_order)
                self.hooks.on_apply(self.state.server_id, action, now_ms())

    def poll_and_apply(self) -> list:
        """One incremental cycle: poll, compact, apply, then retry dirty URIs."""
        events = self.poll_once()
        actions = compact(events)
        self.apply_actions(actions)
        self.retry_dirty()
        return actions

    # -- dirty-set handling --

    def _mark_dirty(self, uri: str, error: Exception) -> None:
        entry = self.dirty.get(uri)
        attempts = entry.attempts + 1 if entry else 1
        backoff_s = min(
            self.dirty_backoff_ms * (2 ** (attempts - 1)), self.dirty_backoff_max_ms
        ) / 1000
        self.dirty[uri] = _DirtyEntry(attempts, time.monotonic() + backoff_s)
        self.hooks.on_dirty(self.state.server_id, uri, error)

    def retry_dirty(self) -> None:
        now = time.monotonic()
        for uri in [u for u, e in self.dirty.items() if e.not_before <= now]:
            try:
                g = self._fetch_resource(uri)
            except FetchError as exc:
                self._mark_dirty(uri, exc)
                continue
            with self.apply_lock:
                if g is None:
                    self.dataset.delete_graph(Iri(uri))
                    self.owned.discard(uri)
                else:
                    self.dataset.upsert_graph(Iri(uri), g)
                    self.owned.add(uri)
            del self.dirty[uri]
            self.hooks.on_dirty_resolved(self.state.server_id, uri)
