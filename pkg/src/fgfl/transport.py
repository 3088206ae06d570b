"""Message transports: deterministic in-process loopback and MQTT.

Both implementations satisfy one contract: at-least-once delivery of
complete payloads to every subscription whose filter matches the topic,
with per-topic FIFO ordering from a single publisher. Each subscription
feeds exactly one consumer queue. The loopback additionally delivers in
global publish order, which makes simulated federations reproducible.

The MQTT binding speaks MQTT 3.1.1 directly over a TCP (optionally TLS)
socket: QoS 1 publishes and subscriptions with application-level
deduplication, retained messages, and wildcard filters. Payloads above
the chunk limit are fragmented with the wire module's chunk framing, so
broker payload caps are never hit.
"""

from __future__ import annotations

import logging
import queue
import socket
import ssl
import struct
import threading
import time
from dataclasses import dataclass

from . import wire

log = logging.getLogger("fgfl.transport")


class TransportError(RuntimeError):
    pass


class TransportTimeout(TransportError):
    pass


class Subscription:
    """Single-consumer queue of (topic, payload) pairs."""

    def __init__(self, pattern: str):
        self.pattern = pattern
        self._queue: "queue.Queue[tuple[str, bytes]]" = queue.Queue()

    def deliver(self, topic: str, payload: bytes) -> None:
        self._queue.put((topic, payload))

    def get(self, timeout: float | None = None) -> tuple[str, bytes]:
        try:
            return self._queue.get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeout(f"no message on {self.pattern!r} within {timeout}s") from None


class Transport:
    """Contract shared by loopback and MQTT transports."""

    def publish(self, topic: str, payload: bytes, retain: bool = False) -> None:
        raise NotImplementedError

    def subscribe(self, pattern: str, into: Subscription | None = None) -> Subscription:
        """Subscribe; pass ``into`` to merge several filters onto one queue."""
        raise NotImplementedError

    def close(self) -> None:  # pragma: no cover - trivial default
        pass


class LoopbackTransport(Transport):
    """In-process pub/sub with retained messages and MQTT-style filters.

    Publishing is safe from multiple threads; messages are enqueued to
    matching subscriptions under one lock, so delivery order equals
    publish order across all topics.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._subs: list[tuple[str, Subscription]] = []
        self._retained: dict[str, bytes] = {}

    def publish(self, topic: str, payload: bytes, retain: bool = False) -> None:
        with self._lock:
            if retain:
                if payload:
                    self._retained[topic] = payload
                else:
                    self._retained.pop(topic, None)
            delivered = set()
            for pattern, sub in self._subs:
                if id(sub) not in delivered and wire.topic_matches(pattern, topic):
                    sub.deliver(topic, payload)
                    delivered.add(id(sub))

    def subscribe(self, pattern: str, into: Subscription | None = None) -> Subscription:
        sub = into if into is not None else Subscription(pattern)
        with self._lock:
            self._subs.append((pattern, sub))
            for topic in sorted(self._retained):
                if wire.topic_matches(pattern, topic):
                    sub.deliver(topic, self._retained[topic])
        return sub


def loopback_transport() -> LoopbackTransport:
    return LoopbackTransport()


# ---------------------------------------------------------------------------
# federation message endpoint (chunk framing over any transport)
# ---------------------------------------------------------------------------

class MessageSubscription:
    """Reassembles chunked federation messages from one subscription."""

    def __init__(self, sub: Subscription, reassembly_timeout: float = 30.0):
        self._sub = sub
        self._assembler = wire.ChunkReassembler(timeout=reassembly_timeout)

    def receive(self, timeout: float | None = None) -> wire.FederationMessage:
        """Next complete, well-formed message; corrupt ones are dropped and logged."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            if deadline is not None and remaining == 0.0:
                raise TransportTimeout(f"no complete message within {timeout}s")
            topic, payload = self._sub.get(timeout=remaining)
            now = time.monotonic()
            try:
                chunk = wire.decode_chunk(payload)
                data = self._assembler.add(chunk, now=now)
                self._assembler.expire(now)
                if data is None:
                    continue
                return wire.decode(data)
            except wire.WireError as exc:
                log.warning("dropping bad payload on %s: %s", topic, exc)


class MessageEndpoint:
    """Publishes/consumes FederationMessages over a byte transport."""

    def __init__(self, transport: Transport, max_chunk: int = wire.DEFAULT_MAX_CHUNK):
        self.transport = transport
        self.max_chunk = max_chunk

    def send(self, topic: str, msg: wire.FederationMessage, retain: bool = False, compress: bool = False) -> None:
        data = wire.encode(msg, compress=compress)
        for chunk in wire.chunk_split(data, self.max_chunk):
            self.transport.publish(topic, wire.encode_chunk(chunk), retain=retain)

    def listen(self, *patterns: str, reassembly_timeout: float = 30.0) -> MessageSubscription:
        """One merged message stream over one or more topic filters."""
        sub: Subscription | None = None
        for pattern in patterns:
            sub = self.transport.subscribe(pattern, into=sub)
        if sub is None:
            raise TransportError("listen needs at least one topic filter")
        return MessageSubscription(sub, reassembly_timeout)


# ---------------------------------------------------------------------------
# MQTT 3.1.1 client
# ---------------------------------------------------------------------------

_CONNECT, _CONNACK, _PUBLISH, _PUBACK = 1, 2, 3, 4
_SUBSCRIBE, _SUBACK, _UNSUBSCRIBE, _UNSUBACK = 8, 9, 10, 11
_PINGREQ, _PINGRESP, _DISCONNECT = 12, 13, 14


def _encode_varint(n: int) -> bytes:
    out = bytearray()
    while True:
        byte = n % 128
        n //= 128
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _mqtt_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(">H", len(raw)) + raw


@dataclass(frozen=True)
class TlsConfig:
    """Certificate files for an encrypted broker connection."""

    ca_file: str
    cert_file: str | None = None
    key_file: str | None = None

    def client_context(self) -> ssl.SSLContext:
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
        ctx.load_verify_locations(self.ca_file)
        if self.cert_file and self.key_file:
            ctx.load_cert_chain(self.cert_file, self.key_file)
        return ctx


class MqttTransport(Transport):
    """Minimal MQTT 3.1.1 client: QoS 1, retained flags, wildcard filters.

    Incoming QoS 1 publishes are acknowledged immediately and handed to
    every matching subscription queue; duplicate deliveries are the
    subscriber's concern (the federation layer dedups by round/sender).
    """

    def __init__(
        self,
        host: str,
        port: int = 1883,
        client_id: str = "fgfl-client",
        tls: TlsConfig | None = None,
        keepalive: int = 60,
        connect_retries: int = 5,
        retry_backoff: float = 0.3,
        ack_timeout: float = 10.0,
    ):
        self._host = host
        self._port = port
        self._client_id = client_id
        self._keepalive = keepalive
        self._ack_timeout = ack_timeout
        self._lock = threading.Lock()
        self._subs: list[tuple[str, Subscription]] = []
        self._acks: dict[int, threading.Event] = {}
        self._next_packet_id = 1
        self._closed = False

        last_error: Exception | None = None
        sock = None
        for attempt in range(connect_retries):
            try:
                sock = socket.create_connection((host, port), timeout=10.0)
                break
            except OSError as exc:
                last_error = exc
                time.sleep(retry_backoff * (2**attempt))
        if sock is None:
            raise TransportError(f"broker {host}:{port} unreachable: {last_error}")
        if tls is not None:
            try:
                sock = tls.client_context().wrap_socket(sock, server_hostname=host)
            except ssl.SSLError as exc:
                raise TransportError(f"TLS handshake with {host}:{port} failed: {exc}") from exc
        sock.settimeout(None)
        self._sock = sock
        self._send_connect()
        self._reader = threading.Thread(target=self._read_loop, daemon=True, name=f"mqtt-{client_id}")
        self._connack = threading.Event()
        self._connack_code = -1
        self._reader.start()
        if not self._connack.wait(self._ack_timeout):
            raise TransportError("broker did not answer CONNECT")
        if self._connack_code != 0:
            raise TransportError(f"broker refused connection (code {self._connack_code})")
        self._pinger = threading.Thread(target=self._ping_loop, daemon=True, name=f"mqtt-ping-{client_id}")
        self._pinger.start()

    # -- wire helpers ------------------------------------------------------

    def _send_packet(self, packet_type: int, flags: int, body: bytes) -> None:
        frame = bytes([(packet_type << 4) | flags]) + _encode_varint(len(body)) + body
        with self._lock:
            self._sock.sendall(frame)

    def _send_connect(self) -> None:
        var = _mqtt_str("MQTT") + bytes([4, 0x02]) + struct.pack(">H", self._keepalive)
        self._send_packet(_CONNECT, 0, var + _mqtt_str(self._client_id))

    def _claim_packet_id(self) -> tuple[int, threading.Event]:
        with self._lock:
            pid = self._next_packet_id
            self._next_packet_id = pid % 65535 + 1
            event = threading.Event()
            self._acks[pid] = event
        return pid, event

    def _await_ack(self, pid: int, event: threading.Event, what: str) -> None:
        if not event.wait(self._ack_timeout):
            self._acks.pop(pid, None)
            raise TransportError(f"broker did not acknowledge {what} (packet {pid})")

    # -- Transport contract ------------------------------------------------

    def publish(self, topic: str, payload: bytes, retain: bool = False) -> None:
        pid, event = self._claim_packet_id()
        head = _mqtt_str(topic) + struct.pack(">H", pid)
        flags = 0x02 | (0x01 if retain else 0x00)  # QoS 1
        self._send_packet(_PUBLISH, flags, head + payload)
        self._await_ack(pid, event, f"PUBLISH to {topic}")

    def subscribe(self, pattern: str, into: Subscription | None = None) -> Subscription:
        sub = into if into is not None else Subscription(pattern)
        with self._lock:
            self._subs.append((pattern, sub))
        pid, event = self._claim_packet_id()
        body = struct.pack(">H", pid) + _mqtt_str(pattern) + bytes([1])
        self._send_packet(_SUBSCRIBE, 0x02, body)
        self._await_ack(pid, event, f"SUBSCRIBE {pattern}")
        return sub

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._send_packet(_DISCONNECT, 0, b"")
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass

    # -- background loops --------------------------------------------------

    def _ping_loop(self) -> None:
        interval = max(1.0, self._keepalive / 2.0)
        while not self._closed:
            time.sleep(interval)
            if self._closed:
                return
            try:
                self._send_packet(_PINGREQ, 0, b"")
            except OSError:
                return

    def _recv_exact(self, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            part = self._sock.recv(n - len(buf))
            if not part:
                raise ConnectionError("broker closed the connection")
            buf += part
        return buf

    def _read_packet(self) -> tuple[int, int, bytes]:
        first = self._recv_exact(1)[0]
        length = 0
        shift = 0
        while True:
            byte = self._recv_exact(1)[0]
            length |= (byte & 0x7F) << shift
            if not byte & 0x80:
                break
            shift += 7
            if shift > 21:
                raise ConnectionError("malformed remaining length")
        body = self._recv_exact(length) if length else b""
        return first >> 4, first & 0x0F, body

    def _read_loop(self) -> None:
        try:
            while not self._closed:
                packet_type, flags, body = self._read_packet()
                if packet_type == _CONNACK:
                    self._connack_code = body[1] if len(body) >= 2 else 255
                    self._connack.set()
                elif packet_type in (_PUBACK, _SUBACK, _UNSUBACK):
                    pid = struct.unpack(">H", body[:2])[0]
                    event = self._acks.pop(pid, None)
                    if event:
                        event.set()
                elif packet_type == _PUBLISH:
                    qos = (flags >> 1) & 0x03
                    topic_len = struct.unpack(">H", body[:2])[0]
                    topic = body[2 : 2 + topic_len].decode("utf-8")
                    offset = 2 + topic_len
                    if qos > 0:
                        pid = struct.unpack(">H", body[offset : offset + 2])[0]
                        offset += 2
                        self._send_packet(_PUBACK, 0, struct.pack(">H", pid))
                    payload = body[offset:]
                    targets = []
                    seen: set[int] = set()
                    with self._lock:
                        for p, s in self._subs:
                            if id(s) not in seen and wire.topic_matches(p, topic):
                                targets.append(s)
                                seen.add(id(s))
                    for sub in targets:
                        sub.deliver(topic, payload)
                elif packet_type == _PINGRESP:
                    pass
        except (OSError, ConnectionError) as exc:
            if not self._closed:
                log.warning("mqtt reader stopped: %s", exc)


def mqtt_transport(
    broker: str,
    client_id: str = "fgfl-client",
    tls: TlsConfig | None = None,
    **kwargs,
) -> MqttTransport:
    """Connect to ``host[:port]`` and return a transport handle."""
    host, _, port = broker.partition(":")
    return MqttTransport(host, int(port) if port else 1883, client_id=client_id, tls=tls, **kwargs)
