"""MQTT push path: change-event messages, publisher batching, gap recovery.

Servers publish recorded change events to ``trs/{serverId}/events``; the
warehouse side subscribes, reconstructs the events, and applies them through
the same sync client the poll path uses.  Out-of-sequence messages fall back
to a change-log pull, so delivery gaps never corrupt the warehouse.

The broker is behind a small port (publish/subscribe callables), with an
in-process implementation here for deterministic tests and a socket MQTT
client in ``lcq.mqtt311``.
"""

from __future__ import annotations

import json
import threading
import time
from collections import deque
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .trs_client import FetchError, LogTruncatedError, TrsSyncClient, compact
from .trs_server import ChangeEvent


class MessageDecodeError(ValueError):
    """Payload is not a valid change-event message."""


def topic_for(server_id: str) -> str:
    return f"trs/{server_id}/events"


def topic_matches(pattern: str, topic: str) -> bool:
    """MQTT topic-filter match with `+` (one level) and `#` (rest) wildcards."""
    plevels = pattern.split("/")
    tlevels = topic.split("/")
    for i, p in enumerate(plevels):
        if p == "#":
            return True
        if i >= len(tlevels):
            return False
        if p != "+" and p != tlevels[i]:
            return False
    return len(plevels) == len(tlevels)


def encode_message(server_id: str, events: Sequence[ChangeEvent]) -> bytes:
    """Canonical compact JSON: keys serverId, events; events keep log order."""
    if not events:
        raise ValueError("change event message must carry at least one event")
    for prev, cur in zip(events, events[1:]):
        if cur.order <= prev.order:
            raise ValueError("event orders must be strictly ascending")
    payload = {
        "serverId": server_id,
        "events": [e.to_json_dict() for e in events],
    }
    return json.dumps(payload, separators=(",", ":")).encode("utf-8")


def decode_message(data: bytes) -> tuple[str, tuple[ChangeEvent, ...]]:
    try:
        payload = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MessageDecodeError(f"malformed message payload: {exc}") from exc
    if not isinstance(payload, dict):
        raise MessageDecodeError("malformed message payload: not an object")
    server_id = payload.get("serverId")
    raw_events = payload.get("events")
    if not isinstance(server_id, str) or not server_id:
        raise MessageDecodeError("malformed message payload: missing serverId")
    if not isinstance(raw_events, list) or not raw_events:
        raise MessageDecodeError("malformed message payload: empty events")
    try:
        events = tuple(ChangeEvent.from_json_dict(d) for d in raw_events)
    except (ValueError, TypeError) as exc:
        raise MessageDecodeError(str(exc)) from exc
    for prev, cur in zip(events, events[1:]):
        if cur.order <= prev.order:
            raise MessageDecodeError("event orders must be strictly ascending")
    return server_id, events


class BrokerUnavailableError(ConnectionError):
    """Raised by a bus/client when a publish cannot reach the broker."""


class _Subscription:
    """One subscriber callback with its own FIFO delivery thread."""

    def __init__(self, pattern: str, callback: Callable[[str, bytes], None]):
        self.pattern = pattern
        self.callback = callback
        self._queue: deque = deque()
        self._cond = threading.Condition()
        self._busy = 0
        self._closed = False
        self._thread = threading.Thread(target=self._drain, daemon=True)
        self._thread.start()

    def enqueue(self, topic: str, payload: bytes) -> None:
        with self._cond:
            self._queue.append((topic, payload))
            self._cond.notify_all()

    def _drain(self) -> None:
        while True:
            with self._cond:
                while not self._queue and not self._closed:
                    self._cond.wait()
                if self._closed and not self._queue:
                    return
                topic, payload = self._queue.popleft()
                self._busy += 1
            try:
                self.callback(topic, payload)
            except Exception:
                pass
            finally:
                with self._cond:
                    self._busy -= 1
                    self._cond.notify_all()

    def idle(self) -> bool:
        with self._cond:
            return not self._queue and self._busy == 0

    def wait_idle(self, deadline: float) -> bool:
        with self._cond:
            while self._queue or self._busy:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._cond.wait(remaining)
            return True

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()
        self._thread.join(timeout=5)


class InProcessBus:
    """Broker stand-in: synchronous fan-out into per-subscriber FIFO queues.

    Publishers never block on subscriber callbacks.  ``set_offline`` makes
    publishes fail (for buffering tests) and ``loss_filter`` drops selected
    deliveries (for gap-recovery tests).
    """

    def __init__(self):
        self._subs: list[_Subscription] = []
        self._lock = threading.Lock()
        self._offline = False
        self.loss_filter: Optional[Callable[[str, bytes], bool]] = None
        self.published_count = 0
        self.dropped_in_flight = 0

    def set_offline(self, offline: bool) -> None:
        with self._lock:
            self._offline = offline

    def subscribe(self, pattern: str, callback: Callable[[str, bytes], None]) -> None:
        with self._lock:
            self._subs.append(_Subscription(pattern, callback))

    def publish(self, topic: str, payload: bytes) -> None:
        with self._lock:
            if self._offline:
                raise BrokerUnavailableError("broker unavailable")
            self.published_count += 1
            if self.loss_filter is not None and self.loss_filter(topic, payload):
                self.dropped_in_flight += 1
                return
            targets = [s for s in self._subs if topic_matches(s.pattern, topic)]
        for sub in targets:
            sub.enqueue(topic, payload)

    def flush(self, timeout: float = 5.0) -> bool:
        """Wait until every queued delivery has been handled."""
        deadline = time.monotonic() + timeout
        with self._lock:
            subs = list(self._subs)
        return all(s.wait_idle(deadline) for s in subs)

    def close(self) -> None:
        with self._lock:
            subs, self._subs = self._subs, []
        for sub in subs:
            sub.close()


class ChangePublisher:
    """Publishes recorded change events, in order, exactly once per event.

    ``on_change`` only enqueues (it runs inside the service's write lock); a
    worker thread does the actual publishing.  With a batch window, events
    arriving within ``batch_window_ms`` of each other share a message, capped
    at ``max_batch``.  While the broker is unreachable events accumulate up to
    ``buffer_max`` and then the oldest are dropped; the drop count is surfaced
    so the pull fallback's role is visible in metrics.
    """

    def __init__(
        self,
        bus,
        server_id: str,
        *,
        batch_window_ms: int = 0,
        max_batch: int = 10,
        buffer_max: int = 1000,
        retry_interval_ms: int = 20,
    ):
        if max_batch < 1 or buffer_max < 1:
            raise ValueError("max_batch and buffer_max must be positive")
        self._bus = bus
        self.server_id = server_id
        self.topic = topic_for(server_id)
        self._window_s = batch_window_ms / 1000.0
        self._max_batch = max_batch
        self._buffer_max = buffer_max
        self._retry_s = retry_interval_ms / 1000.0
        self.published_count = 0
        self.message_count = 0
        self.dropped_count = 0
        self.publish_failures = 0
        self._queue: deque = deque()
        self._cond = threading.Condition()
        self._busy = False
        self._closed = False
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def on_change(self, event: ChangeEvent) -> None:
        with self._cond:
            if self._closed:
                return
            self._queue.append(event)
            self._trim_locked()
            self._cond.notify_all()

    def _trim_locked(self) -> None:
        while len(self._queue) > self._buffer_max:
            self._queue.popleft()
            self.dropped_count += 1

    def _take_batch(self) -> list:
        """Block until events are pending, then cut one batch per the window."""
        with self._cond:
            while not self._queue and not self._closed:
                self._cond.wait()
            if not self._queue:
                return []
            if self._window_s > 0:
                deadline = time.monotonic() + self._window_s
                while len(self._queue) < self._max_batch and not self._closed:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        break
                    self._cond.wait(remaining)
            size = self._max_batch if self._window_s > 0 else 1
            batch = [self._queue.popleft() for _ in range(min(size, len(self._queue)))]
            self._busy = True
            return batch

    def _run(self) -> None:
        while True:
            batch = self._take_batch()
            if not batch:
                return
            try:
                self._bus.publish(self.topic, encode_message(self.server_id, batch))
                with self._cond:
                    self.published_count += len(batch)
                    self.message_count += 1
                    self._busy = False
                    self._cond.notify_all()
            except Exception:
                with self._cond:
                    self.publish_failures += 1
                    self._queue.extendleft(reversed(batch))
                    self._trim_locked()
                    self._busy = False
                    self._cond.notify_all()
                    if not self._closed:
                        self._cond.wait(self._retry_s)

    def pending_count(self) -> int:
        with self._cond:
            return len(self._queue)

    def flush(self, timeout: float = 5.0) -> bool:
        """Wait for the queue to drain; False if it cannot (broker down)."""
        deadline = time.monotonic() + timeout
        with self._cond:
            while self._queue or self._busy:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._cond.wait(remaining)
            return True

    def close(self) -> None:
        with self._cond:
            if self._closed:
                return
            self._closed = True
            self._cond.notify_all()
        self._thread.join(timeout=5)


class GapDetector:
    """Tracks, per server, the next change order the push path expects."""

    def __init__(self):
        self._expected: dict[str, int] = {}
        self._lock = threading.Lock()

    def expected(self, server_id: str) -> int:
        with self._lock:
            return self._expected.get(server_id, 1)

    def in_sequence(self, server_id: str, first_order: int) -> bool:
        return first_order == self.expected(server_id)

    def advance_to(self, server_id: str, next_order: int) -> None:
        with self._lock:
            if next_order > self._expected.get(server_id, 1):
                self._expected[server_id] = next_order


class ChangeSubscriber:
    """Applies pushed change events, pulling the change log to close gaps.

    In-sequence messages apply directly (compacted).  A message starting past
    the expected order means deliveries were lost, so the client polls the
    change log to catch up.  A message starting before the expected order is
    a QoS-1 redelivery; already-applied events are discarded, which makes the
    whole path idempotent.
    """

    def __init__(self, clients: Mapping[str, TrsSyncClient]):
        self._clients = dict(clients)
        self.detector = GapDetector()
        for server_id, client in self._clients.items():
            self.detector.advance_to(server_id, client.state.last_applied_order + 1)
        self.messages_received = 0
        self.decode_failures = 0
        self.unknown_server_count = 0
        self.gap_catchups = 0
        self.stale_messages = 0
        self.pull_failures = 0

    def attach(self, bus, pattern: str = "trs/+/events") -> None:
        bus.subscribe(pattern, self.on_message)

    def on_message(self, topic: str, payload: bytes) -> None:
        self.messages_received += 1
        try:
            server_id, events = decode_message(payload)
        except MessageDecodeError:
            self.decode_failures += 1
            return
        client = self._clients.get(server_id)
        if client is None:
            self.unknown_server_count += 1
            return
        try:
            self._handle(server_id, client, events)
        except LogTruncatedError:
            client.initial_sync()
        except FetchError:
            self.pull_failures += 1
        self.detector.advance_to(server_id, client.state.last_applied_order + 1)

    def _handle(self, server_id, client, events) -> None:
        first = events[0].order
        expected = self.detector.expected(server_id)
        contiguous = events[-1].order - first + 1 == len(events)
        if first > expected or not contiguous:
            # Lost deliveries (or a publisher that dropped buffered events):
            # the change log is the source of truth, so pull to catch up.
            self.gap_catchups += 1
            client.poll_and_apply()
            events = self._still_relevant(client, events)
            if not events:
                return
        elif first < expected:
            self.stale_messages += 1
            events = self._still_relevant(client, events)
            if not events:
                return
        client.apply_actions(compact(list(events)))
        client.retry_dirty()

    @staticmethod
    def _still_relevant(client, events) -> tuple:
        floor = client.state.last_applied_order
        kept = tuple(e for e in events if e.order > floor)
        if kept and kept[0].order != floor + 1:
            return ()
        return kept


def publisher_map(
    bus,
    server_ids: Iterable[str],
    *,
    batch_window_ms: int = 0,
    max_batch: int = 10,
    buffer_max: int = 1000,
) -> dict[str, ChangePublisher]:
    """One publisher per server, keyed by id, sharing one bus connection."""
    return {
        sid: ChangePublisher(
            bus,
            sid,
            batch_window_ms=batch_window_ms,
            max_batch=max_batch,
            buffer_max=buffer_max,
        )
        for sid in server_ids
    }
