"""Command line for the lifecycle-query warehouse.

`up` starts the three demo tool services plus a warehouse on real sockets,
`query` runs a lifecycle query against a warehouse or straight against the
services, `bench` compares the architectures under one seeded workload, and
`dump-metrics` pretty-prints a running warehouse's counters.
"""

from __future__ import annotations

import json
import threading
import time
from pathlib import Path

import click
import httpx

from .bench import BenchSettings, run_bench
from .bridge import BrokerUnavailableError, ChangePublisher, InProcessBus
from .config import Mode, MqttConfig, ServerConfig, WarehouseConfig, load_config
from .direct import DirectClient, DirectQueryError
from .httpserve import HttpServer
from .mqtt311 import MqttClient
from .queries import QUERY_NAMES, canned_query
from .sparql import SparqlError, evaluate_graph, parse_query
from .toolchain import (
    CANONICAL_FIXTURE,
    SERVICE_IDS,
    ToolService,
    WorkloadScript,
    run_workload,
    seed_fixture,
)
from .warehouse import Warehouse, WarehouseStartupError


@click.group()
def main():
    """Lifecycle queries over a linked-data warehouse."""


def _parse_broker(value: str):
    host, _, port = value.partition(":")
    if not host or not port.isdigit():
        raise click.UsageError("--mqtt-broker must be HOST:PORT")
    return host, int(port)


@main.command("up")
@click.option(
    "--mode",
    "mode_name",
    type=click.Choice(["poll", "push", "push-safety"]),
    default="poll",
    show_default=True,
)
@click.option("--poll-period", type=int, default=5000, show_default=True,
              help="poll period in milliseconds")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=0,
              help="warehouse port (0 picks a free one)")
@click.option("--duration", type=float, default=0.0,
              help="run this many seconds then exit (0 = until interrupted)")
@click.option("--workload-steps", type=int, default=0,
              help="drive this many random mutations against the services")
@click.option("--workload-rate", type=float, default=5.0, show_default=True,
              help="workload mutations per second (0 = unpaced)")
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--mqtt-broker", default=None,
              help="HOST:PORT of an external MQTT broker for the push path "
                   "(default: in-process bus)")
def up(mode_name, poll_period, host, port, duration, workload_steps,
       workload_rate, seed, mqtt_broker):
    """Start the demo tool services and a warehouse over them."""
    mode = Mode(mode_name.replace("-", "_"))
    bus = None
    pub_transport = None
    pub_client = None
    mqtt_conf = MqttConfig()
    if mode.pushes:
        if mqtt_broker:
            broker_host, broker_port = _parse_broker(mqtt_broker)
            mqtt_conf = MqttConfig(host=broker_host, port=broker_port)
            pub_client = MqttClient(
                broker_host, broker_port, "toolchain-pub", auto_reconnect=True
            )
            try:
                pub_client.connect()
            except (BrokerUnavailableError, OSError) as exc:
                raise click.ClickException(f"MQTT broker unreachable: {exc}")
            pub_transport = pub_client
        else:
            bus = InProcessBus()
            pub_transport = bus

    services: dict = {}
    front = {}
    for sid in SERVICE_IDS:
        def app(environ, start_response, _sid=sid):
            return services[_sid].wsgi_app(environ, start_response)

        front[sid] = HttpServer(app, host=host).start()
    publishers: dict = {}
    for sid in SERVICE_IDS:
        publisher = None
        if pub_transport is not None:
            publishers[sid] = ChangePublisher(pub_transport, sid)
            publisher = publishers[sid].on_change
        services[sid] = ToolService(
            sid, resource_prefix=front[sid].url, publisher=publisher
        )
    fixture = seed_fixture(CANONICAL_FIXTURE, services)
    for pub in publishers.values():
        pub.flush()
    if bus is not None:
        bus.flush()

    config = WarehouseConfig(
        servers=tuple(
            ServerConfig(
                server_id=sid,
                base_url=front[sid].url,
                trs_url=front[sid].url + "/trs",
                poll_period_ms=poll_period,
            )
            for sid in SERVICE_IDS
        ),
        mode=mode,
        mqtt=mqtt_conf,
    )
    warehouse = Warehouse(config, bus=bus)
    try:
        warehouse.start()
    except (WarehouseStartupError, BrokerUnavailableError) as exc:
        for server in front.values():
            server.stop()
        raise click.ClickException(str(exc))
    endpoint = HttpServer(warehouse.wsgi_app, host=host, port=port).start()

    for sid in SERVICE_IDS:
        click.echo(f"service {sid}: {front[sid].url}")
    click.echo(f"warehouse ({mode.value}): {endpoint.url}")
    click.echo(
        f"  POST {endpoint.url}/sparql, GET {endpoint.url}/metrics, "
        f"GET {endpoint.url}/health"
    )

    driver = None
    if workload_steps > 0:
        script = WorkloadScript(seed=seed, steps=workload_steps, rate=workload_rate)
        driver = threading.Thread(
            target=run_workload, args=(script, services, fixture), daemon=True
        )
        driver.start()
        click.echo(f"workload: {workload_steps} steps at {workload_rate} ops/s")

    try:
        if duration > 0:
            time.sleep(duration)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        click.echo("interrupted")

    if driver is not None:
        driver.join(timeout=0.5)
    for pub in publishers.values():
        pub.flush()
    warehouse.reconcile()
    click.echo(json.dumps(warehouse.metrics_snapshot(), indent=2))
    endpoint.stop()
    warehouse.stop()
    for pub in publishers.values():
        pub.close()
    if bus is not None:
        bus.close()
    if pub_client is not None:
        pub_client.close()
    for server in front.values():
        server.stop()


@main.command("query")
@click.argument("name", required=False)
@click.option("--file", "query_file", type=click.Path(exists=True, dir_okay=False),
              default=None, help="read SPARQL text from a file instead")
@click.option("--cr", "cr_iri", default=None,
              help="change request IRI under review (lcq2)")
@click.option("--r", "r_iri", default=None, help="requirement IRI (lcq2)")
@click.option("--endpoint", default=None,
              help="base URL of a running warehouse to query")
@click.option("--config", "config_path",
              type=click.Path(exists=True, dir_okay=False), default=None,
              help="service config for a direct crawl, no warehouse involved")
def query(name, query_file, cr_iri, r_iri, endpoint, config_path):
    """Run a canned lifecycle query (lcq1, lcq2, lcq3) or a SPARQL file."""
    if (name is None) == (query_file is None):
        raise click.UsageError("give exactly one of NAME or --file")
    if (endpoint is None) == (config_path is None):
        raise click.UsageError("give exactly one of --endpoint or --config")
    if query_file is not None:
        text = Path(query_file).read_text(encoding="utf-8")
    else:
        if name not in QUERY_NAMES:
            raise click.UsageError(
                f"unknown query name: {name} (expected one of {', '.join(QUERY_NAMES)})"
            )
        if name == "lcq2" and not (cr_iri and r_iri):
            raise click.UsageError("lcq2 needs --cr and --r")
        text = canned_query(name, cr_iri, r_iri)

    if endpoint is not None:
        try:
            resp = httpx.post(
                endpoint.rstrip("/") + "/sparql",
                content=text.encode("utf-8"),
                headers={"Content-Type": "application/sparql-query"},
                timeout=30.0,
            )
        except httpx.RequestError as exc:
            raise click.ClickException(f"warehouse unreachable: {exc}")
        if resp.status_code != 200:
            raise click.ClickException(
                f"query failed ({resp.status_code}): {resp.text.strip()}"
            )
        result = resp.json()
    else:
        try:
            config = load_config(config_path)
        except ValueError as exc:
            raise click.UsageError(str(exc))
        with httpx.Client(timeout=30.0) as http:
            client = DirectClient(http, config.servers)
            try:
                result = evaluate_graph(
                    parse_query(text), client.crawl_union()
                ).to_json_dict()
            except SparqlError as exc:
                raise click.ClickException(f"bad query: {exc}")
            except DirectQueryError as exc:
                raise click.ClickException(str(exc))
    click.echo(json.dumps(result, indent=2))


@main.command("bench")
@click.option("--modes", default="poll,push,direct", show_default=True,
              help="comma-separated subset of poll,push,direct")
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--steps", type=int, default=500, show_default=True)
@click.option("--rate", type=float, default=0.0, show_default=True,
              help="workload ops per second (0 = unpaced)")
@click.option("--poll-period", type=int, default=5000, show_default=True)
@click.option("--drop-rate", type=float, default=0.0, show_default=True,
              help="fraction of push messages lost in flight")
@click.option("--repeats", type=int, default=10, show_default=True,
              help="times each canned query runs per mode")
@click.option("--batch-window", type=int, default=0, show_default=True,
              help="publisher batch window in milliseconds")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="also write the full report as JSON")
def bench(modes, seed, steps, rate, poll_period, drop_rate, repeats,
          batch_window, out_path):
    """Run one seeded workload per architecture and compare the results."""
    mode_list = tuple(m.strip() for m in modes.split(",") if m.strip())
    if not mode_list:
        raise click.UsageError("--modes must name at least one mode")
    for m in mode_list:
        if m not in ("poll", "push", "direct"):
            raise click.UsageError(f"unknown bench mode: {m}")
    settings = BenchSettings(
        seed=seed,
        steps=steps,
        rate=rate,
        poll_period_ms=poll_period,
        drop_rate=drop_rate,
        query_repeats=repeats,
        batch_window_ms=batch_window,
    )
    report = run_bench(settings, mode_list)
    click.echo(report.render_table())
    if out_path:
        Path(out_path).write_text(
            json.dumps(report.to_dict(), indent=2), encoding="utf-8"
        )
        click.echo(f"report written to {out_path}")
    if not report.passed:
        raise SystemExit(1)


@main.command("dump-metrics")
@click.option("--endpoint", required=True, help="base URL of a running warehouse")
def dump_metrics(endpoint):
    """Fetch and pretty-print a warehouse's metrics document."""
    try:
        resp = httpx.get(endpoint.rstrip("/") + "/metrics", timeout=10.0)
    except httpx.RequestError as exc:
        raise click.ClickException(f"warehouse unreachable: {exc}")
    if resp.status_code != 200:
        raise click.ClickException(f"metrics request failed: {resp.status_code}")
    click.echo(json.dumps(resp.json(), indent=2))


if __name__ == "__main__":
    main()
