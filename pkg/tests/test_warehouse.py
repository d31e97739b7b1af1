"""Warehouse lifecycle, modes, metrics, persistence, and the HTTP surface."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import replace

import httpx
import pytest

from lcq.bridge import ChangePublisher, InProcessBus
from lcq.config import (
    Mode,
    MqttConfig,
    ServerConfig,
    StoreConfig,
    WarehouseConfig,
    config_from_dict,
    config_to_dict,
    fixture_config,
    load_config,
)
from lcq.rdfmodel import Iri, parse_ntriples
from lcq.toolchain import (
    CANONICAL_FIXTURE,
    TC_REQUIREMENT,
    ToolResource,
    make_services,
    seed_fixture,
    union_live_graphs,
)
from lcq.warehouse import Warehouse, WarehouseStartupError, percentile
from helpers import FlakyApp, inprocess_http, wait_until

LCQ1 = """
PREFIX rdf: <http://www.w3.org/1999/02/22-rdf-syntax-ns#>
PREFIX tc: <http://example.org/toolchain#>
SELECT ?b WHERE {
  ?b rdf:type tc:SimulinkBlock .
  FILTER NOT EXISTS { ?b tc:satisfies ?r }
}
"""


def bound_values(results: dict, var: str) -> set:
    return {b[var]["value"] for b in results["results"]["bindings"]}


class Rig:
    """Fixture services + warehouse over in-process HTTP (and optional bus)."""

    def __init__(self, mode=Mode.POLL, poll_period_ms=5000, bus=None, publishers=None, seed=True):
        self.publishers = publishers or {}
        self._bus = bus
        if bus is not None and not self.publishers:

            def publisher_for(sid):
                pub = ChangePublisher(bus, sid)
                self.publishers[sid] = pub
                return pub.on_change

            self.services = make_services(publisher_for=publisher_for)
        else:
            self.services = make_services()
        self.fixture = seed_fixture(CANONICAL_FIXTURE, self.services, ts=1) if seed else {}
        self.settle()
        self.http = inprocess_http(self.services)
        self.warehouse = Warehouse(
            fixture_config(mode, poll_period_ms),
            http=self.http,
            bus=bus,
            dropped_provider=lambda: sum(p.dropped_count for p in self.publishers.values()),
        )

    def settle(self):
        for pub in self.publishers.values():
            assert pub.flush()
        if self._bus is not None:
            assert self._bus.flush()

    def converged(self):
        return self.warehouse.dataset.snapshot() == union_live_graphs(self.services)

    def close(self):
        self.warehouse.stop()
        for pub in self.publishers.values():
            pub.close()
        if self._bus is not None:
            self._bus.close()


def new_requirement(svc, local_id, ts=None):
    return svc.create_resource(
        ToolResource(
            uri=svc.uri_for(local_id),
            rdf_type=TC_REQUIREMENT,
            title=f"Requirement {local_id}",
            status="DRAFT",
        ),
        ts=ts,
    )


# ---------------------------------------------------------------- config


def test_shipped_example_config_parses():
    from pathlib import Path

    config = load_config(Path(__file__).parent.parent / "fixtures" / "canonical.json")
    assert config.mode is Mode.PUSH_SAFETY
    assert [s.server_id for s in config.servers] == ["reqs", "design", "cm"]
    assert config.store.dump_path == "warehouse-dump.nt"


def test_config_json_round_trip(tmp_path):
    config = WarehouseConfig(
        servers=(
            ServerConfig("reqs", "http://reqs.tc.example", "http://reqs.tc.example/trs"),
            ServerConfig(
                "cm",
                "http://cm.tc.example",
                "http://cm.tc.example/trs",
                poll_period_ms=250,
            ),
        ),
        mode=Mode.PUSH_SAFETY,
        mqtt=MqttConfig(port=2883, client_id="wh-test"),
        store=StoreConfig(dump_path="out.nt"),
    )
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config_to_dict(config)))
    assert load_config(path) == config


@pytest.mark.parametrize(
    "data,needle",
    [
        ({"mode": "warp"}, "unknown mode"),
        ({"unexpected": 1}, "unknown config key: unexpected"),
        ({"servers": [{"server_id": "a", "base_url": "http://a/x", "trs_url": "http://a/trs", "extra": 1}]}, "unknown server key: extra"),
        ({"servers": [{"server_id": "", "base_url": "http://a/x", "trs_url": "http://a/trs"}]}, "server_id"),
        ({"servers": [{"server_id": "a", "base_url": "nope", "trs_url": "http://a/trs"}]}, "absolute URL"),
        (
            {
                "servers": [
                    {"server_id": "a", "base_url": "http://a/x", "trs_url": "http://a/trs"},
                    {"server_id": "a", "base_url": "http://b/x", "trs_url": "http://b/trs"},
                ]
            },
            "unique",
        ),
        (
            {
                "mode": "poll",
                "servers": [
                    {"server_id": "a", "base_url": "http://a/x", "trs_url": "http://a/trs", "poll_period_ms": 0}
                ],
            },
            "poll_period_ms",
        ),
    ],
)
def test_config_rejects_bad_input(data, needle):
    with pytest.raises(ValueError, match=needle):
        config_from_dict(data)


def test_zero_poll_period_fine_in_pure_push_mode():
    config = config_from_dict(
        {
            "mode": "push",
            "servers": [
                {"server_id": "a", "base_url": "http://a/x", "trs_url": "http://a/trs", "poll_period_ms": 0}
            ],
        }
    )
    assert config.mode is Mode.PUSH


def test_load_config_reports_file_and_json_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ValueError, match="not valid JSON"):
        load_config(bad)
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "missing.json")


def test_percentile_nearest_rank():
    assert percentile([], 0.5) is None
    assert percentile([7.0], 0.5) == 7.0
    assert percentile([1, 2, 3, 4], 0.5) == 2.0
    assert percentile(list(range(1, 101)), 0.95) == 95.0
    assert percentile([3, 1, 2], 1.0) == 3.0


# ---------------------------------------------------------------- lifecycle


def test_zero_servers_starts_empty():
    warehouse = Warehouse(WarehouseConfig())
    warehouse.start()
    results = warehouse.sparql_query("SELECT * WHERE { }")
    assert results == {"head": {"vars": []}, "results": {"bindings": [{}]}}
    snap = warehouse.metrics_snapshot()
    assert snap["http_get_total"] == 0
    assert snap["staleness"]["count"] == 0
    warehouse.stop()


def test_poll_cold_start_mirrors_fixture():
    rig = Rig()
    rig.warehouse.start()
    assert rig.converged()
    results = rig.warehouse.sparql_query(LCQ1)
    design = rig.services["design"]
    assert bound_values(results, "b") == {design.uri_for("B3"), design.uri_for("B4")}
    rig.close()


def test_push_cold_start_equals_poll_cold_start():
    poll_rig = Rig(mode=Mode.POLL)
    poll_rig.warehouse.start()
    push_rig = Rig(mode=Mode.PUSH, bus=InProcessBus())
    push_rig.warehouse.start()
    assert poll_rig.warehouse.dataset.snapshot() == push_rig.warehouse.dataset.snapshot()
    poll_rig.close()
    push_rig.close()


def test_startup_failure_names_the_server():
    services = make_services()
    seed_fixture(CANONICAL_FIXTURE, services, ts=1)
    flaky = FlakyApp(services["cm"].wsgi_app)
    flaky.fail("/trs", times=-1)
    http = inprocess_http(services, extra_apps={"cm": flaky})
    warehouse = Warehouse(fixture_config(), http=http)
    with pytest.raises(WarehouseStartupError, match="initial sync failed for server cm"):
        warehouse.start()


def test_double_start_rejected():
    warehouse = Warehouse(WarehouseConfig())
    warehouse.start()
    with pytest.raises(RuntimeError, match="already started"):
        warehouse.start()
    warehouse.stop()


# ---------------------------------------------------------------- sync modes


def test_poll_loop_picks_up_changes():
    rig = Rig(poll_period_ms=30)
    rig.warehouse.start()
    svc = rig.services["reqs"]
    new_requirement(svc, "R9")
    svc.delete_resource(svc.uri_for("R5"))
    assert wait_until(rig.converged)
    snap = rig.warehouse.metrics_snapshot()
    assert snap["poll"]["cycles"] >= 1
    assert snap["last_applied_order"]["reqs"] == svc.trs.max_order()
    rig.close()


def test_push_applies_without_polling():
    bus = InProcessBus()
    rig = Rig(mode=Mode.PUSH, bus=bus)
    rig.warehouse.start()
    svc = rig.services["design"]
    gets_before = svc.resource_get_count
    new_requirement(svc, "B9")
    rig.settle()
    assert wait_until(rig.converged)
    assert svc.resource_get_count == gets_before + 1
    snap = rig.warehouse.metrics_snapshot()
    assert snap["mqtt"]["message_count"] >= 1
    assert snap["poll"]["cycles"] == 0
    rig.close()


def test_push_safety_poll_closes_total_message_loss():
    bus = InProcessBus()
    bus.loss_filter = lambda topic, payload: True
    rig = Rig(mode=Mode.PUSH_SAFETY, poll_period_ms=40, bus=bus)
    rig.warehouse.start()
    svc = rig.services["cm"]
    svc.delete_resource(svc.uri_for("CR3"))
    rig.settle()
    assert wait_until(rig.converged)
    assert rig.warehouse.metrics_snapshot()["mqtt"]["message_count"] == 0
    rig.close()


def test_reconcile_is_an_on_demand_poll():
    rig = Rig(poll_period_ms=60_000)
    rig.warehouse.start()
    svc = rig.services["reqs"]
    new_requirement(svc, "R9")
    assert not rig.converged()
    rig.warehouse.reconcile()
    assert rig.converged()
    rig.close()


# ---------------------------------------------------------------- metrics


def test_fetch_accounting_matches_counting_services_exactly():
    rig = Rig(poll_period_ms=60_000)
    rig.warehouse.start()
    svc = rig.services["reqs"]
    new_requirement(svc, "R9")
    svc.modify_resource(replace(svc.get_resource(svc.uri_for("R1")), title="Requirement R1 rev 2"))
    svc.delete_resource(svc.uri_for("R2"))
    rig.warehouse.reconcile()
    snap = rig.warehouse.metrics_snapshot()
    for sid, service in rig.services.items():
        assert snap["http_get_count"].get(sid, 0) == service.resource_get_count
    rig.close()


def test_staleness_samples_never_negative_and_split_by_action():
    rig = Rig(poll_period_ms=30)
    rig.warehouse.start()
    svc = rig.services["design"]
    new_requirement(svc, "B9")
    svc.delete_resource(svc.uri_for("B9"))
    client = rig.warehouse.clients["design"]
    assert wait_until(lambda: client.state.last_applied_order == svc.trs.max_order())
    rig.warehouse.stop()
    samples = rig.warehouse.metrics.staleness_samples
    # 12 cold-start actions, then the pair lands as one Skip or as two actions
    assert len(samples) in (13, 14)
    assert all(apply_ts >= event_ts for event_ts, apply_ts in samples)
    snap = rig.warehouse.metrics_snapshot()
    assert snap["staleness"]["p50_ms"] is not None
    assert snap["staleness"]["p95_ms"] >= snap["staleness"]["p50_ms"]
    rig.close()


def test_query_latency_and_error_counters():
    warehouse = Warehouse(WarehouseConfig())
    warehouse.start()
    warehouse.sparql_query("SELECT * WHERE { }")
    with pytest.raises(Exception):
        warehouse.sparql_query("SELECT ?x WHERE { ?x OPTIONAL ?y }")
    snap = warehouse.metrics_snapshot()
    assert snap["queries"]["count"] == 1
    assert snap["queries"]["error_count"] == 1
    warehouse.stop()


def test_dropped_provider_feeds_metrics():
    bus = InProcessBus()
    rig = Rig(mode=Mode.PUSH, bus=bus)
    rig.warehouse.start()
    rig.publishers["reqs"].dropped_count = 3
    assert rig.warehouse.metrics_snapshot()["mqtt"]["dropped_count"] == 3
    rig.close()


# ---------------------------------------------------------------- consistency


def test_query_never_sees_partial_action_batch():
    rig = Rig(poll_period_ms=60_000, seed=False)
    rig.warehouse.start()
    svc = rig.services["reqs"]
    dataset = rig.warehouse.dataset
    orig_upsert = dataset.upsert_graph

    def slow_upsert(graph_iri, graph):
        time.sleep(0.02)
        orig_upsert(graph_iri, graph)

    dataset.upsert_graph = slow_upsert
    counts = []
    stop = threading.Event()

    def reader():
        while not stop.is_set():
            results = rig.warehouse.sparql_query(
                "PREFIX rdf: <http://www.w3.org/1999/02/22-rdf-syntax-ns#>\n"
                "PREFIX tc: <http://example.org/toolchain#>\n"
                "SELECT ?s WHERE { ?s rdf:type tc:Requirement }"
            )
            counts.append(len(results["results"]["bindings"]))

    reader_thread = threading.Thread(target=reader)
    reader_thread.start()
    for round_no in range(5):
        new_requirement(svc, f"P{round_no}a")
        new_requirement(svc, f"P{round_no}b")
        rig.warehouse.reconcile()
    stop.set()
    reader_thread.join()
    assert all(c % 2 == 0 for c in counts), f"saw a torn batch: {sorted(set(counts))}"
    rig.close()


# ---------------------------------------------------------------- persistence


def test_dump_then_load_round_trips(tmp_path):
    rig = Rig()
    rig.warehouse.start()
    path = tmp_path / "dump.nt"
    rig.warehouse.dump(path)
    text = path.read_text()
    assert parse_ntriples(text) is not None, "dump stays valid N-Triples"
    restored = Warehouse(WarehouseConfig(store=StoreConfig(load_path=str(path))))
    restored.start()
    assert restored.dataset.snapshot() == rig.warehouse.dataset.snapshot()
    results = restored.sparql_query(LCQ1)
    design = rig.services["design"]
    assert bound_values(results, "b") == {design.uri_for("B3"), design.uri_for("B4")}
    restored.stop()
    rig.close()


def test_stop_dumps_when_configured(tmp_path):
    path = tmp_path / "auto.nt"
    services = make_services()
    seed_fixture(CANONICAL_FIXTURE, services, ts=1)
    config = WarehouseConfig(
        servers=fixture_config().servers, store=StoreConfig(dump_path=str(path))
    )
    warehouse = Warehouse(config, http=inprocess_http(services))
    warehouse.start()
    expected = warehouse.dataset.snapshot()
    warehouse.stop()
    restored = Warehouse(WarehouseConfig(store=StoreConfig(load_path=str(path))))
    restored.start()
    assert restored.dataset.snapshot() == expected
    restored.stop()


def test_restart_from_dump_drops_resources_deleted_while_down(tmp_path):
    path = tmp_path / "dump.nt"
    services = make_services()
    seed_fixture(CANONICAL_FIXTURE, services, ts=1)
    first = Warehouse(
        WarehouseConfig(servers=fixture_config().servers),
        http=inprocess_http(services),
    )
    first.start()
    first.dump(path)
    first.stop()
    # while the warehouse is down: delete a resource, then rebase so the
    # deletion event is truncated out of the log
    design = services["design"]
    design.delete_resource(design.uri_for("B4"), ts=2)
    design.trs.rebase(design.live_uris())
    restored = Warehouse(
        WarehouseConfig(
            servers=fixture_config().servers,
            store=StoreConfig(load_path=str(path)),
        ),
        http=inprocess_http(services),
    )
    restored.start()
    assert restored.dataset.snapshot() == union_live_graphs(services)
    assert restored.dataset.graph(Iri(design.uri_for("B4"))) is None
    restored.stop()


def test_load_rejects_headerless_triples(tmp_path):
    path = tmp_path / "bad.nt"
    path.write_text('<http://a/s> <http://a/p> "x" .\n')
    warehouse = Warehouse(WarehouseConfig())
    with pytest.raises(ValueError, match="graph"):
        warehouse.load(path)


# ---------------------------------------------------------------- HTTP surface


def warehouse_http(warehouse) -> httpx.Client:
    return httpx.Client(
        mounts={"http://wh.example": httpx.WSGITransport(app=warehouse.wsgi_app)}
    )


def test_http_sparql_metrics_health():
    rig = Rig()
    rig.warehouse.start()
    http = warehouse_http(rig.warehouse)
    resp = http.post("http://wh.example/sparql", content=LCQ1)
    assert resp.status_code == 200
    assert resp.headers["content-type"] == "application/json"
    design = rig.services["design"]
    assert bound_values(resp.json(), "b") == {design.uri_for("B3"), design.uri_for("B4")}

    bad = http.post("http://wh.example/sparql", content="SELECT ?x WHERE { LIMIT 5 }")
    assert bad.status_code == 400
    assert "unsupported construct" in bad.text

    assert http.post("http://wh.example/sparql", content="  ").status_code == 400
    assert http.get("http://wh.example/sparql").status_code == 405
    assert http.post("http://wh.example/metrics").status_code == 405
    assert http.get("http://wh.example/nope").status_code == 404

    metrics = http.get("http://wh.example/metrics")
    assert metrics.status_code == 200
    body = metrics.json()
    assert body["mode"] == "poll"
    assert body["queries"]["count"] == 1
    assert body["queries"]["error_count"] == 1

    health = http.get("http://wh.example/health")
    assert health.json() == {"status": "ok"}
    rig.close()
    assert http.get("http://wh.example/health").json() == {"status": "stopped"}
