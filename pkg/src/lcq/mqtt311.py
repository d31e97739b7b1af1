"""Small MQTT 3.1.1 client: QoS-1 publish/subscribe over a TCP broker.

Implements just the packet types the change-event push path needs —
CONNECT/CONNACK, PUBLISH/PUBACK, SUBSCRIBE/SUBACK, PINGREQ/PINGRESP,
DISCONNECT — and presents the same publish/subscribe surface as the
in-process bus, so the bridge's publisher and subscriber run unchanged
against a real broker.

QoS 1 gives at-least-once delivery; deduplication is the subscriber's job
(it discards events at or below its applied order), so redeliveries here
are passed through as-is.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from typing import Callable, Optional

from .bridge import BrokerUnavailableError, topic_matches

CONNECT = 1
CONNACK = 2
PUBLISH = 3
PUBACK = 4
SUBSCRIBE = 8
SUBACK = 9
PINGREQ = 12
PINGRESP = 13
DISCONNECT = 14

CONNACK_MESSAGES = {
    1: "unacceptable protocol version",
    2: "identifier rejected",
    3: "server unavailable",
    4: "bad user name or password",
    5: "not authorized",
}


class MqttProtocolError(ConnectionError):
    """Peer sent bytes that are not valid MQTT 3.1.1."""


def encode_varint(n: int) -> bytes:
    if n < 0 or n > 268_435_455:
        raise ValueError("remaining length out of range")
    out = bytearray()
    while True:
        byte = n % 128
        n //= 128
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _utf8(s: str) -> bytes:
    data = s.encode("utf-8")
    if len(data) > 0xFFFF:
        raise ValueError("string too long for MQTT field")
    return struct.pack("!H", len(data)) + data


def _packet(ptype: int, flags: int, body: bytes) -> bytes:
    return bytes([(ptype << 4) | flags]) + encode_varint(len(body)) + body


def encode_connect(client_id: str, keepalive: int = 60, clean_session: bool = True) -> bytes:
    flags = 0x02 if clean_session else 0x00
    body = _utf8("MQTT") + bytes([0x04, flags]) + struct.pack("!H", keepalive) + _utf8(client_id)
    return _packet(CONNECT, 0, body)


def encode_publish(topic: str, payload: bytes, packet_id: int = 0, qos: int = 1, dup: bool = False) -> bytes:
    flags = (0x08 if dup else 0) | (qos << 1)
    body = _utf8(topic)
    if qos > 0:
        if not 1 <= packet_id <= 0xFFFF:
            raise ValueError("QoS>0 publish needs a nonzero packet id")
        body += struct.pack("!H", packet_id)
    return _packet(PUBLISH, flags, body + payload)


def encode_puback(packet_id: int) -> bytes:
    return _packet(PUBACK, 0, struct.pack("!H", packet_id))


def encode_subscribe(packet_id: int, topic_filter: str, qos: int = 1) -> bytes:
    body = struct.pack("!H", packet_id) + _utf8(topic_filter) + bytes([qos])
    return _packet(SUBSCRIBE, 2, body)


def encode_suback(packet_id: int, return_code: int = 1) -> bytes:
    return _packet(SUBACK, 0, struct.pack("!H", packet_id) + bytes([return_code]))


def encode_connack(return_code: int = 0, session_present: bool = False) -> bytes:
    return _packet(CONNACK, 0, bytes([1 if session_present else 0, return_code]))


def encode_pingreq() -> bytes:
    return _packet(PINGREQ, 0, b"")


def encode_pingresp() -> bytes:
    return _packet(PINGRESP, 0, b"")


def encode_disconnect() -> bytes:
    return _packet(DISCONNECT, 0, b"")


def read_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    """n bytes from the socket, or None on a clean EOF."""
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


def read_packet(sock: socket.socket) -> Optional[tuple[int, int, bytes]]:
    """One packet as (type, flags, body), or None on EOF at a boundary."""
    first = sock.recv(1)
    if not first:
        return None
    ptype, flags = first[0] >> 4, first[0] & 0x0F
    length, shift = 0, 0
    for i in range(4):
        byte = read_exact(sock, 1)
        if byte is None:
            return None
        length |= (byte[0] & 0x7F) << shift
        if not byte[0] & 0x80:
            break
        shift += 7
    else:
        raise MqttProtocolError("malformed remaining length")
    body = b"" if length == 0 else read_exact(sock, length)
    if body is None:
        return None
    return ptype, flags, body


def parse_publish(flags: int, body: bytes) -> tuple[str, bytes, int, int]:
    """PUBLISH body -> (topic, payload, packet_id, qos)."""
    qos = (flags >> 1) & 0x03
    (tlen,) = struct.unpack_from("!H", body, 0)
    topic = body[2 : 2 + tlen].decode("utf-8")
    offset = 2 + tlen
    packet_id = 0
    if qos > 0:
        (packet_id,) = struct.unpack_from("!H", body, offset)
        offset += 2
    return topic, body[offset:], packet_id, qos


class MqttClient:
    """Blocking QoS-1 client with optional auto-reconnect.

    publish() waits for the broker's PUBACK and raises
    BrokerUnavailableError when disconnected or unacknowledged, which is
    exactly the failure the bridge's publisher buffers against.  Incoming
    messages are acknowledged immediately and dispatched to subscription
    callbacks from a dedicated thread, so slow handlers never stall the
    socket reader (or keepalive).
    """

    def __init__(
        self,
        host: str,
        port: int,
        client_id: str,
        *,
        keepalive: int = 60,
        ack_timeout: float = 5.0,
        auto_reconnect: bool = False,
        reconnect_interval: float = 0.2,
    ):
        self.host = host
        self.port = port
        self.client_id = client_id
        self.keepalive = keepalive
        self.ack_timeout = ack_timeout
        self.auto_reconnect = auto_reconnect
        self.reconnect_interval = reconnect_interval
        self._sock: Optional[socket.socket] = None
        self._send_lock = threading.Lock()
        self._state_lock = threading.Lock()
        self._connected = threading.Event()
        self._stop = threading.Event()
        self._closed = False
        self._next_id = 1
        self._pending_acks: dict[int, threading.Event] = {}
        self._subs: list[tuple[str, Callable[[str, bytes], None]]] = []
        self._deliveries: queue.Queue = queue.Queue()
        self._reader: Optional[threading.Thread] = None
        self._dispatcher: Optional[threading.Thread] = None
        self._pinger: Optional[threading.Thread] = None
        self.reconnect_count = 0
        self.callback_errors = 0

    # -- connection --

    def connect(self, timeout: float = 5.0) -> None:
        self._open_socket(timeout)
        self._dispatcher = threading.Thread(target=self._dispatch_loop, daemon=True)
        self._dispatcher.start()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        if self.keepalive > 0:
            self._pinger = threading.Thread(target=self._ping_loop, daemon=True)
            self._pinger.start()

    def _open_socket(self, timeout: float = 5.0) -> None:
        sock = socket.create_connection((self.host, self.port), timeout=timeout)
        sock.settimeout(None)
        sock.sendall(encode_connect(self.client_id, keepalive=self.keepalive))
        packet = read_packet(sock)
        if packet is None or packet[0] != CONNACK or len(packet[2]) != 2:
            sock.close()
            raise MqttProtocolError("expected CONNACK")
        rc = packet[2][1]
        if rc != 0:
            sock.close()
            raise BrokerUnavailableError(
                f"connect refused: {CONNACK_MESSAGES.get(rc, f'code {rc}')}"
            )
        with self._state_lock:
            self._sock = sock
        self._connected.set()

    def close(self) -> None:
        with self._state_lock:
            if self._closed:
                return
            self._closed = True
            sock = self._sock
        self._stop.set()
        self._connected.clear()
        if sock is not None:
            try:
                with self._send_lock:
                    sock.sendall(encode_disconnect())
            except OSError:
                pass
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        self._deliveries.put(None)
        for thread in (self._reader, self._dispatcher, self._pinger):
            if thread is not None and thread is not threading.current_thread():
                thread.join(timeout=5)

    @property
    def connected(self) -> bool:
        return self._connected.is_set()

    # -- outbound --

    def _send(self, data: bytes) -> None:
        with self._state_lock:
            sock = self._sock
        if sock is None or not self._connected.is_set():
            raise BrokerUnavailableError("not connected")
        try:
            with self._send_lock:
                sock.sendall(data)
        except OSError as exc:
            raise BrokerUnavailableError(f"send failed: {exc}") from exc

    def _claim_packet_id(self) -> tuple[int, threading.Event]:
        with self._state_lock:
            while True:
                packet_id = self._next_id
                self._next_id = self._next_id % 0xFFFF + 1
                if packet_id not in self._pending_acks:
                    ack = threading.Event()
                    self._pending_acks[packet_id] = ack
                    return packet_id, ack

    def _await_ack(self, packet_id: int, ack: threading.Event, what: str) -> None:
        try:
            if not ack.wait(self.ack_timeout):
                raise BrokerUnavailableError(f"{what} not acknowledged")
        finally:
            with self._state_lock:
                self._pending_acks.pop(packet_id, None)

    def publish(self, topic: str, payload: bytes) -> None:
        packet_id, ack = self._claim_packet_id()
        try:
            self._send(encode_publish(topic, payload, packet_id))
        except BaseException:
            with self._state_lock:
                self._pending_acks.pop(packet_id, None)
            raise
        self._await_ack(packet_id, ack, "publish")

    def subscribe(self, pattern: str, callback: Callable[[str, bytes], None]) -> None:
        with self._state_lock:
            self._subs.append((pattern, callback))
        packet_id, ack = self._claim_packet_id()
        self._send(encode_subscribe(packet_id, pattern))
        self._await_ack(packet_id, ack, "subscribe")

    # -- inbound --

    def _read_loop(self) -> None:
        while True:
            with self._state_lock:
                sock, closed = self._sock, self._closed
            if closed:
                return
            try:
                packet = read_packet(sock)
            except (OSError, MqttProtocolError):
                packet = None
            if packet is None:
                if not self._handle_drop():
                    return
                continue
            ptype, flags, body = packet
            if ptype == PUBLISH:
                topic, payload, packet_id, qos = parse_publish(flags, body)
                if qos > 0:
                    try:
                        self._send(encode_puback(packet_id))
                    except BrokerUnavailableError:
                        pass
                self._deliveries.put((topic, payload))
            elif ptype in (PUBACK, SUBACK):
                (packet_id,) = struct.unpack_from("!H", body, 0)
                with self._state_lock:
                    ack = self._pending_acks.get(packet_id)
                if ack is not None:
                    ack.set()
            # PINGRESP and anything else needs no action

    def _handle_drop(self) -> bool:
        """Socket lost: reconnect (resubscribing) or report the reader done."""
        self._connected.clear()
        with self._state_lock:
            if self._closed or not self.auto_reconnect:
                return False
        while True:
            if self._stop.wait(self.reconnect_interval):
                return False
            with self._state_lock:
                subs = list(self._subs)
            try:
                self._open_socket()
            except (OSError, ConnectionError):
                continue
            self.reconnect_count += 1
            try:
                for pattern, _ in subs:
                    packet_id, ack = self._claim_packet_id()
                    self._send(encode_subscribe(packet_id, pattern))
                    # SUBACK arrives once this loop is back in read_packet,
                    # so don't block on it here
                    with self._state_lock:
                        self._pending_acks.pop(packet_id, None)
            except BrokerUnavailableError:
                continue
            return True

    def _dispatch_loop(self) -> None:
        while True:
            item = self._deliveries.get()
            if item is None:
                return
            topic, payload = item
            with self._state_lock:
                subs = list(self._subs)
            for pattern, callback in subs:
                if topic_matches(pattern, topic):
                    try:
                        callback(topic, payload)
                    except Exception:
                        self.callback_errors += 1

    def _ping_loop(self) -> None:
        interval = max(self.keepalive / 2.0, 0.1)
        while True:
            if self._stop.wait(interval):
                return
            if self._connected.is_set():
                try:
                    self._send(encode_pingreq())
                except BrokerUnavailableError:
                    pass

    def flush(self, timeout: float = 5.0) -> bool:
        """Wait for locally queued deliveries to be dispatched."""
        deadline = time.monotonic() + timeout
        while not self._deliveries.empty():
            if time.monotonic() > deadline:
                return False
            time.sleep(0.005)
        return True
