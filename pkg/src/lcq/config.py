"""Warehouse configuration: typed records plus a strict JSON loader."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional


class Mode(Enum):
    POLL = "poll"
    PUSH = "push"
    PUSH_SAFETY = "push_safety"

    @property
    def polls(self) -> bool:
        return self in (Mode.POLL, Mode.PUSH_SAFETY)

    @property
    def pushes(self) -> bool:
        return self in (Mode.PUSH, Mode.PUSH_SAFETY)


@dataclass(frozen=True)
class ServerConfig:
    server_id: str
    base_url: str
    trs_url: str
    poll_period_ms: int = 5000
    # logical resource prefix, when it differs from where resources are hosted
    resource_prefix: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.server_id:
            raise ValueError("server_id must be non-empty")
        for name in ("base_url", "trs_url"):
            if "://" not in getattr(self, name):
                raise ValueError(f"{name} must be an absolute URL")


@dataclass(frozen=True)
class MqttConfig:
    host: str = "127.0.0.1"
    port: int = 1883
    client_id: str = "warehouse"
    topic_pattern: str = "trs/+/events"
    keepalive: int = 60


@dataclass(frozen=True)
class StoreConfig:
    dump_path: Optional[str] = None
    load_path: Optional[str] = None


@dataclass(frozen=True)
class WarehouseConfig:
    servers: tuple = ()
    mode: Mode = Mode.POLL
    mqtt: MqttConfig = field(default_factory=MqttConfig)
    store: StoreConfig = field(default_factory=StoreConfig)

    def __post_init__(self) -> None:
        ids = [s.server_id for s in self.servers]
        if len(set(ids)) != len(ids):
            raise ValueError("server_ids must be unique")
        if self.mode.polls:
            for s in self.servers:
                if s.poll_period_ms <= 0:
                    raise ValueError(
                        f"poll_period_ms must be positive for {s.server_id} in {self.mode.value} mode"
                    )

    def server(self, server_id: str) -> ServerConfig:
        for s in self.servers:
            if s.server_id == server_id:
                return s
        raise KeyError(server_id)


def _build(cls, data: dict, what: str):
    fields = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - fields
    if unknown:
        raise ValueError(f"unknown {what} key: {sorted(unknown)[0]}")
    return cls(**data)


def config_from_dict(data: dict) -> WarehouseConfig:
    if not isinstance(data, dict):
        raise ValueError("config root must be an object")
    known = {"servers", "mode", "mqtt", "store"}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config key: {sorted(unknown)[0]}")
    raw_mode = data.get("mode", "poll")
    try:
        mode = Mode(raw_mode)
    except ValueError:
        raise ValueError(f"unknown mode: {raw_mode!r}") from None
    servers = tuple(
        _build(ServerConfig, s, "server") for s in data.get("servers", [])
    )
    return WarehouseConfig(
        servers=servers,
        mode=mode,
        mqtt=_build(MqttConfig, data.get("mqtt", {}), "mqtt"),
        store=_build(StoreConfig, data.get("store", {}), "store"),
    )


def config_to_dict(config: WarehouseConfig) -> dict:
    return {
        "servers": [
            {
                "server_id": s.server_id,
                "base_url": s.base_url,
                "trs_url": s.trs_url,
                "poll_period_ms": s.poll_period_ms,
                **({"resource_prefix": s.resource_prefix} if s.resource_prefix else {}),
            }
            for s in config.servers
        ],
        "mode": config.mode.value,
        "mqtt": {
            "host": config.mqtt.host,
            "port": config.mqtt.port,
            "client_id": config.mqtt.client_id,
            "topic_pattern": config.mqtt.topic_pattern,
            "keepalive": config.mqtt.keepalive,
        },
        "store": {
            "dump_path": config.store.dump_path,
            "load_path": config.store.load_path,
        },
    }


def load_config(path) -> WarehouseConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON: {exc}") from exc
    try:
        return config_from_dict(data)
    except (ValueError, TypeError) as exc:
        raise ValueError(f"{path}: {exc}") from exc


def fixture_config(mode: Mode = Mode.POLL, poll_period_ms: int = 5000) -> WarehouseConfig:
    """Config for the three in-process demo services."""
    servers = tuple(
        ServerConfig(
            server_id=sid,
            base_url=f"http://{sid}.tc.example",
            trs_url=f"http://{sid}.tc.example/trs",
            poll_period_ms=poll_period_ms,
        )
        for sid in ("reqs", "design", "cm")
    )
    return WarehouseConfig(servers=servers, mode=mode)
