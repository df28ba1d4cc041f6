"""Minimal MQTT 3.1.1 subset: a QoS-0 client and an in-process loopback broker.

Implements exactly the packets the gateway needs: CONNECT/CONNACK,
SUBSCRIBE/SUBACK, PUBLISH (QoS 0 only), PINGREQ/PINGRESP, DISCONNECT.
No retained messages, no sessions, no QoS 1/2, no auth.  The broker exists
so gateway integration runs against a real TCP wire without an external
dependency; production deployments point the client at a real broker.
"""

from __future__ import annotations

import logging
import socket
import struct
import threading
from typing import Callable

log = logging.getLogger(__name__)

CONNECT = 1
CONNACK = 2
PUBLISH = 3
SUBSCRIBE = 8
SUBACK = 9
PINGREQ = 12
PINGRESP = 13
DISCONNECT = 14


class MqttProtocolError(RuntimeError):
    pass


def _encode_remaining_length(n: int) -> bytes:
    out = bytearray()
    while True:
        byte = n % 128
        n //= 128
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def _encode_string(s: str) -> bytes:
    data = s.encode("utf-8")
    return struct.pack(">H", len(data)) + data


def _packet(ptype: int, flags: int, body: bytes) -> bytes:
    return bytes([(ptype << 4) | flags]) + _encode_remaining_length(len(body)) + body


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed")
        buf += chunk
    return buf


def _read_packet(sock: socket.socket) -> tuple[int, int, bytes]:
    head = _read_exact(sock, 1)[0]
    ptype, flags = head >> 4, head & 0x0F
    length = 0
    shift = 0
    while True:
        byte = _read_exact(sock, 1)[0]
        length |= (byte & 0x7F) << shift
        if not byte & 0x80:
            break
        shift += 7
        if shift > 21:
            raise MqttProtocolError("remaining length too long")
    body = _read_exact(sock, length) if length else b""
    return ptype, flags, body


def _parse_publish(body: bytes) -> tuple[str, bytes]:
    (tlen,) = struct.unpack(">H", body[:2])
    topic = body[2 : 2 + tlen].decode("utf-8")
    return topic, body[2 + tlen :]


def topic_matches(pattern: str, topic: str) -> bool:
    """MQTT filter matching with '+' (one level) and '#' (rest) wildcards."""
    pparts = pattern.split("/")
    tparts = topic.split("/")
    for i, p in enumerate(pparts):
        if p == "#":
            return True
        if i >= len(tparts):
            return False
        if p != "+" and p != tparts[i]:
            return False
    return len(pparts) == len(tparts)


class MqttClient:
    """QoS-0 client: connect, subscribe, publish, and a reader thread."""

    def __init__(
        self,
        host: str,
        port: int,
        client_id: str = "knotgate",
        on_message: Callable[[str, bytes], None] | None = None,
    ):
        self.host = host
        self.port = port
        self.client_id = client_id
        self.on_message = on_message
        self._sock: socket.socket | None = None
        self._write_lock = threading.Lock()
        self._packet_id = 0
        self._reader: threading.Thread | None = None
        self._closing = False

    def connect(self, timeout: float = 5.0) -> None:
        sock = socket.create_connection((self.host, self.port), timeout=timeout)
        sock.settimeout(None)
        body = (
            _encode_string("MQTT")
            + bytes([4])  # protocol level 3.1.1
            + bytes([0x02])  # clean session
            + struct.pack(">H", 0)  # keepalive disabled
            + _encode_string(self.client_id)
        )
        sock.sendall(_packet(CONNECT, 0, body))
        ptype, _, ack = _read_packet(sock)
        if ptype != CONNACK or len(ack) != 2 or ack[1] != 0:
            raise MqttProtocolError(f"connect refused: {ack!r}")
        self._sock = sock
        self._reader = threading.Thread(target=self._read_loop, name="mqtt-reader", daemon=True)
        self._reader.start()

    def _next_packet_id(self) -> int:
        self._packet_id = self._packet_id % 0xFFFF + 1
        return self._packet_id

    def subscribe(self, topic_filter: str) -> None:
        body = struct.pack(">H", self._next_packet_id()) + _encode_string(topic_filter) + bytes([0])
        self._send(_packet(SUBSCRIBE, 0x02, body))

    def publish(self, topic: str, payload: bytes) -> None:
        self._send(_packet(PUBLISH, 0, _encode_string(topic) + payload))

    def disconnect(self) -> None:
        self._closing = True
        try:
            self._send(_packet(DISCONNECT, 0, b""))
        except OSError:
            pass
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def _send(self, data: bytes) -> None:
        if self._sock is None:
            raise MqttProtocolError("not connected")
        with self._write_lock:
            self._sock.sendall(data)

    def _read_loop(self) -> None:
        try:
            while True:
                ptype, _, body = _read_packet(self._sock)
                if ptype == PUBLISH:
                    topic, payload = _parse_publish(body)
                    if self.on_message is not None:
                        try:
                            self.on_message(topic, payload)
                        except Exception:
                            log.exception("on_message handler failed")
                elif ptype in (SUBACK, PINGRESP):
                    continue
                elif ptype == DISCONNECT:
                    return
        except (ConnectionError, OSError):
            if not self._closing:
                log.warning("mqtt connection lost")


class LoopbackBroker:
    """Tiny TCP broker speaking the subset above; one thread per client."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.host = host
        self._requested_port = port
        self.port: int | None = None
        self._server: socket.socket | None = None
        self._lock = threading.Lock()
        # socket -> (write lock, list of topic filters)
        self._clients: dict[socket.socket, tuple[threading.Lock, list[str]]] = {}
        self._accepting: threading.Thread | None = None
        self._closing = False

    def start(self) -> None:
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind((self.host, self._requested_port))
        server.listen()
        self.port = server.getsockname()[1]
        self._server = server
        self._accepting = threading.Thread(target=self._accept_loop, name="mqtt-broker", daemon=True)
        self._accepting.start()

    def stop(self) -> None:
        self._closing = True
        if self._server is not None:
            try:
                self._server.close()
            except OSError:
                pass
        with self._lock:
            clients = list(self._clients)
            self._clients.clear()
        for sock in clients:
            try:
                sock.close()
            except OSError:
                pass

    def _accept_loop(self) -> None:
        while not self._closing:
            try:
                sock, _ = self._server.accept()
            except OSError:
                return
            threading.Thread(target=self._serve_client, args=(sock,), daemon=True).start()

    def _serve_client(self, sock: socket.socket) -> None:
        try:
            ptype, _, _body = _read_packet(sock)
            if ptype != CONNECT:
                sock.close()
                return
            sock.sendall(bytes([CONNACK << 4, 2, 0, 0]))
            with self._lock:
                self._clients[sock] = (threading.Lock(), [])
            while True:
                ptype, _, body = _read_packet(sock)
                if ptype == SUBSCRIBE:
                    packet_id = body[:2]
                    (flen,) = struct.unpack(">H", body[2:4])
                    topic_filter = body[4 : 4 + flen].decode("utf-8")
                    with self._lock:
                        self._clients[sock][1].append(topic_filter)
                    sock.sendall(_packet(SUBACK, 0, packet_id + bytes([0])))
                elif ptype == PUBLISH:
                    topic, payload = _parse_publish(body)
                    self._fanout(topic, payload)
                elif ptype == PINGREQ:
                    sock.sendall(_packet(PINGRESP, 0, b""))
                elif ptype == DISCONNECT:
                    return
        except (ConnectionError, OSError, MqttProtocolError):
            pass
        finally:
            with self._lock:
                self._clients.pop(sock, None)
            try:
                sock.close()
            except OSError:
                pass

    def _fanout(self, topic: str, payload: bytes) -> None:
        frame = _packet(PUBLISH, 0, _encode_string(topic) + payload)
        with self._lock:
            targets = [
                (client, wlock)
                for client, (wlock, filters) in self._clients.items()
                if any(topic_matches(f, topic) for f in filters)
            ]
        for client, wlock in targets:
            try:
                with wlock:
                    client.sendall(frame)
            except OSError:
                log.warning("dropping unreachable mqtt subscriber")
