"""The linked-data warehouse: one dataset, one SPARQL endpoint, two sync paths.

The warehouse owns the Dataset and a sync client per upstream server.  In
poll mode each server is polled on its own period; in push mode an MQTT
subscription applies change events as they arrive; push_safety runs both.
Every applied action contributes a staleness sample (apply time minus the
change's server timestamp — one clock, desk scale), and every resource
fetch is counted per server, which is what the benchmark modes compare.

Queries take a consistent snapshot of the union view under the same lock
the updater holds across whole action batches, so a query never observes a
half-applied batch.
"""

from __future__ import annotations

import json
import math
import threading
import time
from typing import Callable, Optional

import httpx

from .bridge import ChangeSubscriber
from .config import Mode, WarehouseConfig
from .httpserve import not_found, respond
from .rdfmodel import Dataset, Iri, parse_ntriples, serialize_ntriples
from .sparql import SparqlError, evaluate_graph, parse_query
from .trs_client import (
    EffectiveAction,
    LogTruncatedError,
    Resolver,
    SyncHooks,
    TrsSyncClient,
)


class WarehouseStartupError(RuntimeError):
    """Initial sync failed for a named server; the warehouse did not start."""


def percentile(samples: list, q: float) -> Optional[float]:
    """Nearest-rank percentile; None on no samples."""
    if not samples:
        return None
    ordered = sorted(samples)
    rank = max(1, math.ceil(q * len(ordered)))
    return float(ordered[rank - 1])


class Metrics:
    """Counters the warehouse can observe, updated atomically under one lock."""

    def __init__(self):
        self._lock = threading.Lock()
        self.staleness_samples: list = []  # (event_ts, apply_ts) ms pairs
        self.http_get_count: dict = {}  # server_id -> resource GETs
        self.apply_action_counts: dict = {}  # ActionKind value -> applied count
        self.query_latencies_ms: list = []
        self.query_error_count = 0
        self.poll_cycle_count = 0
        self.poll_failure_count = 0
        self.dirty_uris: set = set()

    def record_fetch(self, server_id: str) -> None:
        with self._lock:
            self.http_get_count[server_id] = self.http_get_count.get(server_id, 0) + 1

    def record_apply(self, event_ts: int, apply_ts: int, kind: str) -> None:
        with self._lock:
            self.staleness_samples.append((event_ts, apply_ts))
            self.apply_action_counts[kind] = self.apply_action_counts.get(kind, 0) + 1

    def record_query(self, latency_ms: float) -> None:
        with self._lock:
            self.query_latencies_ms.append(latency_ms)

    def record_query_error(self) -> None:
        with self._lock:
            self.query_error_count += 1

    def record_poll(self, failed: bool) -> None:
        with self._lock:
            self.poll_cycle_count += 1
            if failed:
                self.poll_failure_count += 1

    def mark_dirty(self, uri: str) -> None:
        with self._lock:
            self.dirty_uris.add(uri)

    def clear_dirty(self, uri: str) -> None:
        with self._lock:
            self.dirty_uris.discard(uri)

    def staleness_values(self) -> list:
        with self._lock:
            return [apply_ts - event_ts for event_ts, apply_ts in self.staleness_samples]

    def http_get_total(self) -> int:
        with self._lock:
            return sum(self.http_get_count.values())

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "http_get_count": dict(self.http_get_count),
                "apply_action_counts": dict(self.apply_action_counts),
                "query_latencies_ms": list(self.query_latencies_ms),
                "query_error_count": self.query_error_count,
                "poll_cycle_count": self.poll_cycle_count,
                "poll_failure_count": self.poll_failure_count,
                "dirty_uris": sorted(self.dirty_uris),
            }


class _MetricsHooks(SyncHooks):
    def __init__(self, metrics: Metrics):
        self.metrics = metrics

    def on_fetch(self, server_id: str, uri: str) -> None:
        self.metrics.record_fetch(server_id)

    def on_apply(self, server_id: str, action: EffectiveAction, apply_ts: int) -> None:
        self.metrics.record_apply(action.event_ts, apply_ts, action.action.value)

    def on_dirty(self, server_id: str, uri: str, error: Exception) -> None:
        self.metrics.mark_dirty(uri)

    def on_dirty_resolved(self, server_id: str, uri: str) -> None:
        self.metrics.clear_dirty(uri)


class Warehouse:
    """Dataset + updater pipelines + SPARQL/metrics HTTP surface.

    `http` and `bus` are injectable so tests (and the in-process demo) can
    run against WSGI-mounted services and an in-process bus; by default a
    real HTTP client is used and push modes build an MQTT client from the
    config.  `dropped_provider` lets the host report publisher-side MQTT
    drops in this warehouse's metrics, since only publishers see those.
    """

    def __init__(
        self,
        config: WarehouseConfig,
        *,
        http: Optional[httpx.Client] = None,
        bus=None,
        dropped_provider: Optional[Callable[[], int]] = None,
    ):
        self.config = config
        self.dataset = Dataset()
        self.apply_lock = threading.RLock()
        self.metrics = Metrics()
        self._dropped_provider = dropped_provider
        self._own_http = http is None
        self.http = http if http is not None else httpx.Client(timeout=10.0)
        self._bus = bus
        self._own_bus = False
        self.subscriber: Optional[ChangeSubscriber] = None
        self._stop = threading.Event()
        self._threads: list = []
        self._started = False
        hooks = _MetricsHooks(self.metrics)
        self.clients: dict = {}
        for server in config.servers:
            resolver = None
            if server.resource_prefix and server.resource_prefix != server.base_url:
                resolver = Resolver(server.resource_prefix, server.base_url)
            client = TrsSyncClient(
                http=self.http,
                server_id=server.server_id,
                trs_url=server.trs_url,
                dataset=self.dataset,
                resolver=resolver,
                hooks=hooks,
            )
            client.apply_lock = self.apply_lock
            self.clients[server.server_id] = client

    # -- lifecycle --

    def start(self) -> "Warehouse":
        if self._started:
            raise RuntimeError("warehouse already started")
        if self.config.store.load_path:
            self.load(self.config.store.load_path)
            self._claim_loaded_graphs()
        for server_id, client in self.clients.items():
            try:
                client.initial_sync()
            except Exception as exc:
                self.stop()
                raise WarehouseStartupError(
                    f"initial sync failed for server {server_id}: {exc}"
                ) from exc
        self._started = True
        if self.config.mode.pushes:
            self.subscriber = ChangeSubscriber(self.clients)
            if self._bus is None:
                from .mqtt311 import MqttClient

                mqtt = self.config.mqtt
                self._bus = MqttClient(
                    mqtt.host,
                    mqtt.port,
                    mqtt.client_id,
                    keepalive=mqtt.keepalive,
                    auto_reconnect=True,
                )
                self._bus.connect()
                self._own_bus = True
            self.subscriber.attach(self._bus, self.config.mqtt.topic_pattern)
        if self.config.mode.polls:
            for server in self.config.servers:
                thread = threading.Thread(
                    target=self._poll_loop,
                    args=(self.clients[server.server_id], server.poll_period_ms / 1000.0),
                    daemon=True,
                )
                thread.start()
                self._threads.append(thread)
        return self

    def _claim_loaded_graphs(self) -> None:
        """Assign loaded graphs to their servers' clients, so the first sync
        can drop any that were deleted while the warehouse was down."""
        for server in self.config.servers:
            prefix = (server.resource_prefix or server.base_url).rstrip("/") + "/"
            client = self.clients[server.server_id]
            for iri in self.dataset.graph_iris():
                if iri.value.startswith(prefix):
                    client.owned.add(iri.value)

    def stop(self) -> None:
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=5)
        self._threads.clear()
        if self._own_bus and self._bus is not None:
            self._bus.close()
            self._bus = None
        if self.config.store.dump_path and self._started:
            self.dump(self.config.store.dump_path)
        if self._own_http:
            self.http.close()
        self._started = False

    def _poll_loop(self, client: TrsSyncClient, period_s: float) -> None:
        while not self._stop.wait(period_s):
            try:
                client.poll_and_apply()
                self.metrics.record_poll(failed=False)
            except LogTruncatedError:
                try:
                    client.initial_sync()
                    self.metrics.record_poll(failed=False)
                except Exception:
                    self.metrics.record_poll(failed=True)
            except Exception:
                self.metrics.record_poll(failed=True)

    def reconcile(self) -> None:
        """One synchronous pull pass over every server (quiescence fence)."""
        for client in self.clients.values():
            try:
                client.poll_and_apply()
            except LogTruncatedError:
                client.initial_sync()

    # -- queries --

    def sparql_query(self, text: str) -> dict:
        started = time.perf_counter()
        try:
            query = parse_query(text)
            with self.apply_lock:
                view = self.dataset.union_view()
            table = evaluate_graph(query, view)
        except SparqlError:
            self.metrics.record_query_error()
            raise
        self.metrics.record_query((time.perf_counter() - started) * 1000.0)
        return table.to_json_dict()

    # -- metrics --

    def metrics_snapshot(self) -> dict:
        staleness = self.metrics.staleness_values()
        raw = self.metrics.snapshot()
        get_counts = raw["http_get_count"]
        latencies = raw["query_latencies_ms"]
        sub = self.subscriber
        dropped = self._dropped_provider() if self._dropped_provider else 0
        return {
            "mode": self.config.mode.value,
            "staleness": {
                "count": len(staleness),
                "p50_ms": percentile(staleness, 0.50),
                "p95_ms": percentile(staleness, 0.95),
                "max_ms": float(max(staleness)) if staleness else None,
            },
            "http_get_count": get_counts,
            "http_get_total": sum(get_counts.values()),
            "apply_action_counts": raw["apply_action_counts"],
            "mqtt": {
                "message_count": sub.messages_received if sub else 0,
                "decode_failures": sub.decode_failures if sub else 0,
                "gap_catchups": sub.gap_catchups if sub else 0,
                "stale_messages": sub.stale_messages if sub else 0,
                "dropped_count": dropped,
            },
            "poll": {"cycles": raw["poll_cycle_count"], "failures": raw["poll_failure_count"]},
            "queries": {
                "count": len(latencies),
                "p50_ms": percentile(latencies, 0.50),
                "p95_ms": percentile(latencies, 0.95),
                "error_count": raw["query_error_count"],
            },
            "dirty_uris": raw["dirty_uris"],
            "last_applied_order": {
                sid: client.state.last_applied_order for sid, client in self.clients.items()
            },
        }

    # -- persistence --

    def dump(self, path) -> None:
        """N-Triples with `# graph:` section comments, loadable back as-is."""
        with self.apply_lock:
            graphs = self.dataset.snapshot()
        parts = []
        for iri in sorted(graphs, key=str):
            parts.append(f"# graph: <{iri}>\n")
            parts.append(serialize_ntriples(graphs[iri]))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("".join(parts))

    def load(self, path) -> None:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
        current: Optional[str] = None
        sections: dict = {}
        for line in text.splitlines():
            stripped = line.strip()
            if stripped.startswith("# graph: <") and stripped.endswith(">"):
                current = stripped[len("# graph: <") : -1]
                sections.setdefault(current, [])
            elif stripped:
                if current is None:
                    raise ValueError(f"{path}: triples before any '# graph:' header")
                sections[current].append(line)
        with self.apply_lock:
            for graph_iri, lines in sections.items():
                self.dataset.upsert_graph(Iri(graph_iri), parse_ntriples("\n".join(lines)))

    # -- HTTP surface --

    def wsgi_app(self, environ, start_response):
        method = environ.get("REQUEST_METHOD")
        path = environ.get("PATH_INFO", "")
        if path == "/sparql":
            if method != "POST":
                return respond(start_response, "405 Method Not Allowed", "POST only", "text/plain")
            try:
                length = int(environ.get("CONTENT_LENGTH") or 0)
            except ValueError:
                length = 0
            body = environ["wsgi.input"].read(length).decode("utf-8") if length else ""
            if not body.strip():
                return respond(start_response, "400 Bad Request", "empty query", "text/plain")
            try:
                results = self.sparql_query(body)
            except SparqlError as exc:
                return respond(start_response, "400 Bad Request", str(exc), "text/plain")
            return respond(start_response, "200 OK", json.dumps(results), "application/json")
        if method != "GET":
            return respond(start_response, "405 Method Not Allowed", "GET only", "text/plain")
        if path == "/metrics":
            return respond(
                start_response, "200 OK", json.dumps(self.metrics_snapshot()), "application/json"
            )
        if path == "/health":
            status = {"status": "ok" if self._started else "stopped"}
            return respond(start_response, "200 OK", json.dumps(status), "application/json")
        return not_found(start_response)
