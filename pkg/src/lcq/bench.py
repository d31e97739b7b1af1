"""Benchmark harness: identical seeded workload, one run per architecture.

Each mode gets fresh services seeded from the canonical fixture and the
same workload script.  Poll and push modes run a warehouse and measure
staleness and fetch load; direct mode crawls per query and measures what
that costs instead.  After the workload the harness flushes the push path,
runs one reconcile pass as a quiescence fence, and checks exact dataset
convergence before reporting.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import httpx

from .bridge import ChangePublisher, InProcessBus
from .config import Mode, fixture_config
from .direct import DirectClient
from .queries import canned_query, query_variable
from .rdfmodel import Graph
from .sparql import evaluate_graph, parse_query
from .toolchain import (
    CANONICAL_FIXTURE,
    WorkloadScript,
    make_services,
    run_workload,
    seed_fixture,
    union_live_graphs,
)
from .warehouse import Warehouse, percentile


@dataclass(frozen=True)
class BenchSettings:
    seed: int = 1
    steps: int = 500
    rate: float = 0.0  # workload ops/second; 0 = unpaced
    poll_period_ms: int = 5000
    drop_rate: float = 0.0  # push delivery loss during the workload
    query_repeats: int = 10
    batch_window_ms: int = 0


@dataclass
class ModeReport:
    mode: str
    converged: bool
    workload_ops: int
    staleness_count: int = 0
    staleness_p50_ms: Optional[float] = None
    staleness_p95_ms: Optional[float] = None
    resource_gets: dict = field(default_factory=dict)
    resource_get_total: int = 0
    trs_get_total: int = 0
    mqtt_message_count: int = 0
    mqtt_dropped_count: int = 0
    gap_catchups: int = 0
    apply_action_counts: dict = field(default_factory=dict)
    # base members at warehouse start + every later create/modify event:
    # no sync strategy may fetch more resource bodies than this
    fetch_upper_bound: int = 0
    query_results: dict = field(default_factory=dict)  # name -> sorted uris
    query_latency_p50_ms: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class BenchReport:
    settings: BenchSettings
    modes: list
    results_equivalent: bool
    passed: bool

    def to_dict(self) -> dict:
        return {
            "settings": dict(self.settings.__dict__),
            "modes": [m.to_dict() for m in self.modes],
            "results_equivalent": self.results_equivalent,
            "passed": self.passed,
        }

    def render_table(self) -> str:
        rows = [
            ("converged", lambda m: "yes" if m.converged else "NO"),
            ("staleness p50 (ms)", lambda m: _fmt(m.staleness_p50_ms)),
            ("staleness p95 (ms)", lambda m: _fmt(m.staleness_p95_ms)),
            ("resource GETs", lambda m: str(m.resource_get_total)),
            ("TRS GETs", lambda m: str(m.trs_get_total)),
            ("MQTT messages", lambda m: str(m.mqtt_message_count)),
            ("MQTT dropped", lambda m: str(m.mqtt_dropped_count)),
            ("gap catch-ups", lambda m: str(m.gap_catchups)),
            ("lcq1 p50 (ms)", lambda m: _fmt(m.query_latency_p50_ms.get("lcq1"))),
            ("lcq2 p50 (ms)", lambda m: _fmt(m.query_latency_p50_ms.get("lcq2"))),
            ("lcq3 p50 (ms)", lambda m: _fmt(m.query_latency_p50_ms.get("lcq3"))),
            ("lcq1 results", lambda m: str(len(m.query_results.get("lcq1", [])))),
            ("lcq2 results", lambda m: str(len(m.query_results.get("lcq2", [])))),
            ("lcq3 results", lambda m: str(len(m.query_results.get("lcq3", [])))),
        ]
        names = [m.mode for m in self.modes]
        width0 = max(len(r[0]) for r in rows) + 2
        widths = [max(len(n), 10) + 2 for n in names]
        lines = ["".ljust(width0) + "".join(n.rjust(w) for n, w in zip(names, widths))]
        lines.append("-" * (width0 + sum(widths)))
        for label, cell in rows:
            lines.append(
                label.ljust(width0)
                + "".join(cell(m).rjust(w) for m, w in zip(self.modes, widths))
            )
        verdict = "PASS" if self.passed else "FAIL"
        lines.append("-" * (width0 + sum(widths)))
        lines.append(
            f"result equivalence: {'yes' if self.results_equivalent else 'NO'}   "
            f"overall: {verdict}"
        )
        return "\n".join(lines)


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.1f}"


def _inprocess_http(services) -> httpx.Client:
    mounts = {
        f"http://{sid}.tc.example": httpx.WSGITransport(app=svc.wsgi_app)
        for sid, svc in services.items()
    }
    return httpx.Client(mounts=mounts)


def _canned_params(services) -> dict:
    return {
        "lcq2": (
            services["cm"].uri_for("CR1"),
            services["reqs"].uri_for("R1"),
        )
    }


def _timed_queries(run: Callable[[str], set], services, repeats: int):
    """Run each canned query `repeats` times; return results + p50 latency."""
    results: dict = {}
    latency: dict = {}
    for name in ("lcq1", "lcq2", "lcq3"):
        samples = []
        values: set = set()
        for _ in range(repeats):
            started = time.perf_counter()
            values = run(name)
            samples.append((time.perf_counter() - started) * 1000.0)
        results[name] = sorted(values)
        latency[name] = percentile(samples, 0.50)
    return results, latency


def _base_member_count(services) -> int:
    total = 0
    for svc in services.values():
        page = 0
        while True:
            doc = svc.trs.base_page(page)
            total += len(doc["base"])
            if doc["next"] is None:
                break
            page += 1
    return total


def _cm_event_count(services) -> int:
    """Creation/Modification events still in the logs, straight off the wire."""
    total = 0
    for svc in services.values():
        page = 0
        while True:
            doc = svc.trs.changelog_page(page)
            total += sum(1 for e in doc["changeLog"] if e["kind"] != "Deletion")
            if doc["next"] is None:
                break
            page += 1
    return total


def _expected_results(services) -> dict:
    """Ground truth straight from the services' live resources."""
    union = Graph(
        t for g in union_live_graphs(services).values() for t in g.triples
    )
    params = _canned_params(services)
    expected = {}
    for name in ("lcq1", "lcq2", "lcq3"):
        cr_iri, r_iri = params.get(name, (None, None))
        table = evaluate_graph(parse_query(canned_query(name, cr_iri, r_iri)), union)
        var = query_variable(name)
        expected[name] = sorted(
            {b[var]["value"] for b in table.to_json_dict()["results"]["bindings"]}
        )
    return expected


def run_mode(mode_name: str, settings: BenchSettings) -> ModeReport:
    if mode_name == "direct":
        return _run_direct(settings)
    if mode_name in ("poll", "push"):
        return _run_warehouse(mode_name, settings)
    raise ValueError(f"unknown bench mode: {mode_name}")


def _run_direct(settings: BenchSettings) -> ModeReport:
    services = make_services()
    fixture = seed_fixture(CANONICAL_FIXTURE, services)
    script = WorkloadScript(seed=settings.seed, steps=settings.steps, rate=settings.rate)
    log = run_workload(script, services, fixture)
    http = _inprocess_http(services)
    client = DirectClient(http, fixture_config().servers)
    params = _canned_params(services)

    def run(name: str) -> set:
        cr_iri, r_iri = params.get(name, (None, None))
        return client.run_values(name, cr_iri, r_iri)

    results, latency = _timed_queries(run, services, settings.query_repeats)
    expected = _expected_results(services)
    report = ModeReport(
        mode="direct",
        converged=results == expected,
        workload_ops=len(log),
        resource_gets={sid: svc.resource_get_count for sid, svc in services.items()},
        trs_get_total=sum(svc.trs_get_count for svc in services.values()),
        query_results=results,
        query_latency_p50_ms=latency,
    )
    report.resource_get_total = sum(report.resource_gets.values())
    http.close()
    return report


def _run_warehouse(mode_name: str, settings: BenchSettings) -> ModeReport:
    bus = None
    publishers: dict = {}
    if mode_name == "push":
        bus = InProcessBus()

        def publisher_for(sid):
            publishers[sid] = ChangePublisher(
                bus, sid, batch_window_ms=settings.batch_window_ms
            )
            return publishers[sid].on_change

        services = make_services(publisher_for=publisher_for)
    else:
        services = make_services()
    fixture = seed_fixture(CANONICAL_FIXTURE, services)
    http = _inprocess_http(services)
    config = fixture_config(
        Mode.PUSH if mode_name == "push" else Mode.POLL, settings.poll_period_ms
    )
    def dropped_total() -> int:
        lost = sum(p.dropped_count for p in publishers.values())
        if bus is not None:
            lost += bus.dropped_in_flight
        return lost

    warehouse = Warehouse(config, http=http, bus=bus, dropped_provider=dropped_total)
    # events published while seeding predate the subscription; drain them
    for pub in publishers.values():
        pub.flush()
    if bus is not None:
        bus.flush()
    warehouse.start()
    base_members_at_start = _base_member_count(services)
    drop_rng = random.Random(settings.seed + 7)
    if bus is not None and settings.drop_rate > 0:
        bus.loss_filter = lambda topic, payload: drop_rng.random() < settings.drop_rate
    sample_floor = len(warehouse.metrics.staleness_samples)
    script = WorkloadScript(seed=settings.seed, steps=settings.steps, rate=settings.rate)
    log = run_workload(script, services, fixture)
    for pub in publishers.values():
        pub.flush()
    if bus is not None:
        bus.loss_filter = None
        bus.flush()
    warehouse.reconcile()
    converged = warehouse.dataset.snapshot() == union_live_graphs(services)
    staleness = [
        apply_ts - event_ts
        for event_ts, apply_ts in warehouse.metrics.staleness_samples[sample_floor:]
    ]
    params = _canned_params(services)

    def run(name: str) -> set:
        cr_iri, r_iri = params.get(name, (None, None))
        table = warehouse.sparql_query(canned_query(name, cr_iri, r_iri))
        var = query_variable(name)
        return {b[var]["value"] for b in table["results"]["bindings"]}

    results, latency = _timed_queries(run, services, settings.query_repeats)
    snap = warehouse.metrics_snapshot()
    report = ModeReport(
        mode=mode_name,
        converged=converged,
        workload_ops=len(log),
        staleness_count=len(staleness),
        staleness_p50_ms=percentile(staleness, 0.50),
        staleness_p95_ms=percentile(staleness, 0.95),
        resource_gets={sid: svc.resource_get_count for sid, svc in services.items()},
        trs_get_total=sum(svc.trs_get_count for svc in services.values()),
        mqtt_message_count=snap["mqtt"]["message_count"],
        mqtt_dropped_count=snap["mqtt"]["dropped_count"],
        gap_catchups=snap["mqtt"]["gap_catchups"],
        apply_action_counts=snap["apply_action_counts"],
        fetch_upper_bound=base_members_at_start + _cm_event_count(services),
        query_results=results,
        query_latency_p50_ms=latency,
    )
    report.resource_get_total = sum(report.resource_gets.values())
    warehouse.stop()
    for pub in publishers.values():
        pub.close()
    if bus is not None:
        bus.close()
    return report


def run_bench(settings: BenchSettings, modes=("poll", "push", "direct")) -> BenchReport:
    reports = [run_mode(m, settings) for m in modes]
    result_sets = [r.query_results for r in reports]
    equivalent = all(rs == result_sets[0] for rs in result_sets)
    passed = equivalent and all(r.converged for r in reports)
    return BenchReport(
        settings=settings, modes=reports, results_equivalent=equivalent, passed=passed
    )


def run_load_comparison(query_repeats: int = 10) -> dict:
    """Repeated queries over unchanged data: warehouse fetch-once vs crawl.

    Push mode syncs the fixture once (one GET per live resource) and then
    answers every query from the store; direct mode re-crawls per query.
    """
    bus = InProcessBus()
    publishers: dict = {}

    def publisher_for(sid):
        publishers[sid] = ChangePublisher(bus, sid)
        return publishers[sid].on_change

    services = make_services(publisher_for=publisher_for)
    seed_fixture(CANONICAL_FIXTURE, services)
    for pub in publishers.values():
        pub.flush()
    bus.flush()
    http = _inprocess_http(services)
    warehouse = Warehouse(fixture_config(Mode.PUSH), http=http, bus=bus)
    warehouse.start()
    params = _canned_params(services)
    push_results = {}
    for name in ("lcq1", "lcq2", "lcq3"):
        cr_iri, r_iri = params.get(name, (None, None))
        for _ in range(query_repeats):
            table = warehouse.sparql_query(canned_query(name, cr_iri, r_iri))
        var = query_variable(name)
        push_results[name] = sorted(
            {b[var]["value"] for b in table["results"]["bindings"]}
        )
    push_gets = sum(svc.resource_get_count for svc in services.values())
    base_size = sum(len(svc.live_uris()) for svc in services.values())
    warehouse.stop()
    for pub in publishers.values():
        pub.close()
    bus.close()

    direct_services = make_services()
    seed_fixture(CANONICAL_FIXTURE, direct_services)
    direct_http = _inprocess_http(direct_services)
    client = DirectClient(direct_http, fixture_config().servers)
    direct_params = _canned_params(direct_services)
    direct_results = {}
    for name in ("lcq1", "lcq2", "lcq3"):
        cr_iri, r_iri = direct_params.get(name, (None, None))
        values: set = set()
        for _ in range(query_repeats):
            values = client.run_values(name, cr_iri, r_iri)
        direct_results[name] = sorted(values)
    direct_gets = client.get_total()
    direct_http.close()

    return {
        "query_repeats": query_repeats,
        "initial_base_size": base_size,
        "push_gets": push_gets,
        "direct_gets": direct_gets,
        "direct_strictly_greater": direct_gets > push_gets,
        "results_equivalent": push_results == direct_results,
    }
