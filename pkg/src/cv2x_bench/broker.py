"""Minimal TCP pub-sub broker and client for real-socket runs.

Every transport unit is an envelope: a 4-byte big-endian length prefix
followed by that many bytes, which are a UTF-8 command line terminated by
'\\n' plus an optional raw frame:

    client -> broker:  "SUB <topic>\\n"
                       "PUB <topic>\\n" + frame
    broker -> client:  "MSG <topic>\\n" + frame

Delivery is at-most-once per subscriber connection with per-connection
FIFO ordering; frames published to a topic nobody subscribes to are
silently discarded.
"""

from __future__ import annotations

import socket
import threading

_MAX_ENVELOPE = 64 * 1024 * 1024


class TransportError(ConnectionError):
    """Envelope framing failed or the peer went away mid-message."""


def _read_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = sock.recv(remaining)
        if not chunk:
            raise TransportError("connection closed mid-envelope")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def send_envelope(sock: socket.socket, command: str, frame: bytes = b"") -> None:
    body = command.encode("utf-8") + b"\n" + frame
    sock.sendall(len(body).to_bytes(4, "big") + body)


def recv_envelope(sock: socket.socket) -> tuple[str, bytes]:
    length = int.from_bytes(_read_exact(sock, 4), "big")
    if length > _MAX_ENVELOPE:
        raise TransportError(f"envelope of {length} bytes exceeds limit")
    body = _read_exact(sock, length)
    newline = body.find(b"\n")
    if newline < 0:
        raise TransportError("envelope has no command line")
    return body[:newline].decode("utf-8"), body[newline + 1:]


class Broker:
    """Threaded topic fan-out relay."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0) -> None:
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(16)
        self.host, self.port = self._listener.getsockname()
        self._subscribers: dict[str, list[socket.socket]] = {}
        self._send_locks: dict[socket.socket, threading.Lock] = {}
        self._lock = threading.Lock()
        self._conns: list[socket.socket] = []
        self._running = False
        self._accept_thread: threading.Thread | None = None
        self.frames_relayed = 0
        self.frames_discarded = 0

    def start(self) -> None:
        self._running = True
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               name="broker-accept", daemon=True)
        self._accept_thread.start()

    def subscriber_count(self, topic: str) -> int:
        with self._lock:
            return len(self._subscribers.get(topic, ()))

    def stop(self) -> None:
        self._running = False
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.close()
            except OSError:
                pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=2.0)

    def __enter__(self) -> "Broker":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    def _accept_loop(self) -> None:
        self._listener.settimeout(0.2)
        while self._running:
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                self._conns.append(conn)
                self._send_locks[conn] = threading.Lock()
            threading.Thread(target=self._serve_conn, args=(conn,),
                             name="broker-conn", daemon=True).start()

    def _drop_conn(self, conn: socket.socket) -> None:
        with self._lock:
            for subs in self._subscribers.values():
                if conn in subs:
                    subs.remove(conn)
            if conn in self._conns:
                self._conns.remove(conn)
            self._send_locks.pop(conn, None)
        try:
            conn.close()
        except OSError:
            pass

    def _serve_conn(self, conn: socket.socket) -> None:
        try:
            while self._running:
                command, frame = recv_envelope(conn)
                parts = command.split()
                if len(parts) == 2 and parts[0] == "SUB":
                    with self._lock:
                        self._subscribers.setdefault(parts[1], []).append(conn)
                elif len(parts) == 2 and parts[0] == "PUB":
                    self._fan_out(parts[1], frame)
                else:
                    raise TransportError(f"unknown command {command!r}")
        except (TransportError, OSError):
            pass
        finally:
            self._drop_conn(conn)

    def _fan_out(self, topic: str, frame: bytes) -> None:
        with self._lock:
            targets = list(self._subscribers.get(topic, ()))
        if not targets:
            self.frames_discarded += 1
            return
        for conn in targets:
            lock = self._send_locks.get(conn)
            if lock is None:
                continue
            try:
                with lock:
                    send_envelope(conn, f"MSG {topic}", frame)
                self.frames_relayed += 1
            except OSError:
                self._drop_conn(conn)


class BrokerClient:
    """Blocking single-connection client; one reader at a time."""

    def __init__(self, host: str, port: int, timeout: float = 5.0) -> None:
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._send_lock = threading.Lock()
        self.subscriptions: list[str] = []
        self.frames_published = 0
        self.frames_received = 0

    def subscribe(self, topic: str) -> None:
        with self._send_lock:
            send_envelope(self._sock, f"SUB {topic}")
        self.subscriptions.append(topic)

    def publish(self, topic: str, frame: bytes) -> None:
        with self._send_lock:
            send_envelope(self._sock, f"PUB {topic}", frame)
        self.frames_published += 1

    def recv_message(self, timeout: float | None = None) -> tuple[str, bytes] | None:
        """Next (topic, frame) delivered to a subscription, or None on timeout.

        The timeout only covers the idle wait for a message to start; once
        the first byte of an envelope arrives the rest is read blocking, so
        a poll timeout can never split an envelope.
        """
        self._sock.settimeout(timeout)
        try:
            first = self._sock.recv(1)
        except socket.timeout:
            return None
        finally:
            self._sock.settimeout(None)
        if not first:
            raise TransportError("connection closed")
        length = int.from_bytes(first + _read_exact(self._sock, 3), "big")
        if length > _MAX_ENVELOPE:
            raise TransportError(f"envelope of {length} bytes exceeds limit")
        body = _read_exact(self._sock, length)
        newline = body.find(b"\n")
        if newline < 0:
            raise TransportError("envelope has no command line")
        command, frame = body[:newline].decode("utf-8"), body[newline + 1:]
        parts = command.split()
        if len(parts) != 2 or parts[0] != "MSG":
            raise TransportError(f"unexpected broker message {command!r}")
        self.frames_received += 1
        return parts[1], frame

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "BrokerClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
