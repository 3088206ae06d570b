"""A small MQTT 3.1.1 broker for development and tests.

Supports exactly what the transport layer needs: CONNECT/CONNACK,
QoS 0/1 PUBLISH with PUBACK, retained messages, SUBSCRIBE/UNSUBSCRIBE
with + and # wildcard filters, PINGREQ/PINGRESP, and optional TLS. One
thread per connection; topic routing under a single lock preserves
per-publisher FIFO order. Not intended as a production broker -- point
the transport at a real one for deployments.

Run standalone:  python -m fgfl.mqttd --port 1883
"""

from __future__ import annotations

import argparse
import logging
import socket
import ssl
import struct
import threading

from .transport import _encode_varint, _mqtt_str
from .wire import topic_matches

log = logging.getLogger("fgfl.mqttd")

_CONNECT, _CONNACK, _PUBLISH, _PUBACK = 1, 2, 3, 4
_SUBSCRIBE, _SUBACK, _UNSUBSCRIBE, _UNSUBACK = 8, 9, 10, 11
_PINGREQ, _PINGRESP, _DISCONNECT = 12, 13, 14


class _Session:
    def __init__(self, sock: socket.socket, broker: "MqttBroker"):
        self.sock = sock
        self.broker = broker
        self.client_id = ""
        self.filters: dict[str, int] = {}
        self.write_lock = threading.Lock()
        self.next_packet_id = 1
        self.alive = True

    # -- frame I/O ---------------------------------------------------------

    def _recv_exact(self, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            part = self.sock.recv(n - len(buf))
            if not part:
                raise ConnectionError("client went away")
            buf += part
        return buf

    def read_packet(self) -> tuple[int, int, bytes]:
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
        return first >> 4, first & 0x0F, self._recv_exact(length) if length else b""

    def send_packet(self, packet_type: int, flags: int, body: bytes) -> None:
        frame = bytes([(packet_type << 4) | flags]) + _encode_varint(len(body)) + body
        with self.write_lock:
            self.sock.sendall(frame)

    def send_publish(self, topic: str, payload: bytes, qos: int, retain: bool) -> None:
        head = _mqtt_str(topic)
        flags = (qos << 1) | (1 if retain else 0)
        if qos > 0:
            with self.write_lock:
                pid = self.next_packet_id
                self.next_packet_id = pid % 65535 + 1
            head += struct.pack(">H", pid)
        try:
            self.send_packet(_PUBLISH, flags, head + payload)
        except OSError:
            self.alive = False

    # -- packet handlers ----------------------------------------------------

    def run(self) -> None:
        try:
            packet_type, _, body = self.read_packet()
            if packet_type != _CONNECT:
                return
            self._handle_connect(body)
            while self.alive:
                packet_type, flags, body = self.read_packet()
                if packet_type == _PUBLISH:
                    self._handle_publish(flags, body)
                elif packet_type == _SUBSCRIBE:
                    self._handle_subscribe(body)
                elif packet_type == _UNSUBSCRIBE:
                    self._handle_unsubscribe(body)
                elif packet_type == _PINGREQ:
                    self.send_packet(_PINGRESP, 0, b"")
                elif packet_type == _PUBACK:
                    pass  # at-least-once: no redelivery bookkeeping
                elif packet_type == _DISCONNECT:
                    return
        except (ConnectionError, OSError, ssl.SSLError):
            pass
        finally:
            self.alive = False
            self.broker._detach(self)
            try:
                self.sock.close()
            except OSError:
                pass

    def _handle_connect(self, body: bytes) -> None:
        name_len = struct.unpack(">H", body[:2])[0]
        offset = 2 + name_len + 1 + 1 + 2  # name, level, flags, keepalive
        id_len = struct.unpack(">H", body[offset : offset + 2])[0]
        self.client_id = body[offset + 2 : offset + 2 + id_len].decode("utf-8")
        self.send_packet(_CONNACK, 0, bytes([0, 0]))
        log.debug("client %s connected", self.client_id)

    def _handle_publish(self, flags: int, body: bytes) -> None:
        qos = (flags >> 1) & 0x03
        retain = bool(flags & 0x01)
        topic_len = struct.unpack(">H", body[:2])[0]
        topic = body[2 : 2 + topic_len].decode("utf-8")
        offset = 2 + topic_len
        if qos > 0:
            pid = struct.unpack(">H", body[offset : offset + 2])[0]
            offset += 2
            self.send_packet(_PUBACK, 0, struct.pack(">H", pid))
        self.broker.route(topic, body[offset:], retain)

    def _handle_subscribe(self, body: bytes) -> None:
        pid = struct.unpack(">H", body[:2])[0]
        offset = 2
        granted = bytearray()
        new_filters = []
        while offset < len(body):
            flen = struct.unpack(">H", body[offset : offset + 2])[0]
            topic_filter = body[offset + 2 : offset + 2 + flen].decode("utf-8")
            offset += 2 + flen
            qos = min(body[offset], 1)
            offset += 1
            new_filters.append((topic_filter, qos))
            granted.append(qos)
        self.send_packet(_SUBACK, 0, struct.pack(">H", pid) + bytes(granted))
        for topic_filter, qos in new_filters:
            self.broker.add_subscription(self, topic_filter, qos)

    def _handle_unsubscribe(self, body: bytes) -> None:
        pid = struct.unpack(">H", body[:2])[0]
        offset = 2
        while offset < len(body):
            flen = struct.unpack(">H", body[offset : offset + 2])[0]
            topic_filter = body[offset + 2 : offset + 2 + flen].decode("utf-8")
            offset += 2 + flen
            self.filters.pop(topic_filter, None)
        self.send_packet(_UNSUBACK, 0, struct.pack(">H", pid))


class MqttBroker:
    """Threaded broker bound to localhost by default."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, tls_context: ssl.SSLContext | None = None):
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(32)
        self.host, self.port = self._listener.getsockname()
        self._tls_context = tls_context
        self._lock = threading.Lock()
        self._sessions: list[_Session] = []
        self._retained: dict[str, bytes] = {}
        self._running = False
        self._accept_thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "MqttBroker":
        self._running = True
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True, name="mqttd-accept")
        self._accept_thread.start()
        return self

    def stop(self) -> None:
        self._running = False
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            sessions = list(self._sessions)
        for session in sessions:
            try:
                session.sock.close()
            except OSError:
                pass

    def _accept_loop(self) -> None:
        while self._running:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            if self._tls_context is not None:
                try:
                    conn = self._tls_context.wrap_socket(conn, server_side=True)
                except ssl.SSLError as exc:
                    log.warning("TLS handshake failed: %s", exc)
                    conn.close()
                    continue
            session = _Session(conn, self)
            with self._lock:
                self._sessions.append(session)
            threading.Thread(target=session.run, daemon=True, name="mqttd-session").start()

    def add_subscription(self, session: _Session, topic_filter: str, qos: int) -> None:
        with self._lock:
            session.filters[topic_filter] = qos
            retained = [
                (t, p) for t, p in sorted(self._retained.items()) if topic_matches(topic_filter, t)
            ]
        for topic, payload in retained:
            session.send_publish(topic, payload, qos, retain=True)

    def route(self, topic: str, payload: bytes, retain: bool) -> None:
        with self._lock:
            if retain:
                if payload:
                    self._retained[topic] = payload
                else:
                    self._retained.pop(topic, None)
            targets = [
                (s, max(q for f, q in s.filters.items() if topic_matches(f, topic)))
                for s in self._sessions
                if s.alive and any(topic_matches(f, topic) for f in s.filters)
            ]
        for session, qos in targets:
            session.send_publish(topic, payload, qos, retain=False)

    def _detach(self, session: _Session) -> None:
        with self._lock:
            if session in self._sessions:
                self._sessions.remove(session)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Development MQTT broker")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=1883)
    parser.add_argument("--tls-cert")
    parser.add_argument("--tls-key")
    args = parser.parse_args(argv)
    tls_context = None
    if args.tls_cert and args.tls_key:
        tls_context = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        tls_context.load_cert_chain(args.tls_cert, args.tls_key)
    logging.basicConfig(level=logging.INFO)
    broker = MqttBroker(host=args.host, port=args.port, tls_context=tls_context).start()
    log.info("broker listening on %s", broker.address)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        broker.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
