"""Threaded TCP service base, one-shot client calls, and the UDP monitor emitter."""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
from typing import Callable, Optional, Union

from .model import MonitorRecord, parse_hostport
from .protocol import (
    ProtocolError,
    Request,
    Response,
    decode_request,
    encode_monitor_record,
    encode_request,
    encode_response,
    read_head,
    read_response,
)

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 5.0

# A handler may return a response plus a callback told how many body bytes
# reached the socket and whether the whole write succeeded.
HandlerResult = Union[Response, tuple[Response, Callable[[int, bool], None]]]


def format_hostport(addr: tuple) -> str:
    return f"{addr[0]}:{addr[1]}"


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True
    block_on_close = False


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        service: Service = self.server.service  # type: ignore[attr-defined]
        sock: socket.socket = self.request
        sock.settimeout(service.io_timeout)
        service._conn_enter()
        try:
            try:
                req = decode_request(read_head(sock))
            except (ProtocolError, OSError) as exc:
                log.debug("%s: bad request from %s: %s", service.name, self.client_address, exc)
                self._send(sock, encode_response(Response.status(500)))
                return
            try:
                result = service.handle(req, format_hostport(self.client_address))
            except Exception:
                log.exception("%s: handler failed", service.name)
                result = Response.status(500)
            if isinstance(result, tuple):
                resp, on_sent = result
            else:
                resp, on_sent = result, None
            data = encode_response(resp)
            head_len = len(data) - len(resp.body)
            sent, ok = self._send(sock, data)
            if on_sent is not None:
                on_sent(max(0, sent - head_len), ok)
        finally:
            service._conn_exit()

    @staticmethod
    def _send(sock, data: bytes) -> tuple[int, bool]:
        view, sent = memoryview(data), 0
        try:
            while sent < len(data):
                sent += sock.send(view[sent:sent + (1 << 20)])
        except OSError:
            return sent, False
        return sent, True


class Service:
    """A data-protocol server: one request per connection, thread per connection.

    Subclasses implement ``handle(req, peer)``.
    """

    name = "service"
    io_timeout = 10.0

    def __init__(self, bind: tuple[str, int]):
        self._server = _TCPServer(bind, _Handler, bind_and_activate=True)
        self._server.service = self  # type: ignore[attr-defined]
        self._thread: Optional[threading.Thread] = None
        self._conn_lock = threading.Lock()
        self._active = 0

    @property
    def address(self) -> str:
        return format_hostport(self._server.server_address)

    def _conn_enter(self):
        with self._conn_lock:
            self._active += 1

    def _conn_exit(self):
        with self._conn_lock:
            self._active -= 1

    @property
    def active_connections(self) -> int:
        with self._conn_lock:
            return self._active

    def handle(self, req: Request, peer: str) -> HandlerResult:
        raise NotImplementedError

    def start(self):
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        kwargs={"poll_interval": 0.05},
                                        name=f"{self.name}-{self.address}", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        if self._thread is not None:
            self._server.shutdown()
            self._thread.join()
            self._thread = None
        self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def call(endpoint: str, req: Request, timeout: float = DEFAULT_TIMEOUT) -> Response:
    """Send one request and read the response. Raises OSError when unreachable."""
    host, port = parse_hostport(endpoint)
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.settimeout(timeout)
        sock.sendall(encode_request(req))
        return read_response(sock)


def stats(endpoint: str, timeout: float = DEFAULT_TIMEOUT) -> dict:
    resp = call(endpoint, Request("STATS"), timeout=timeout)
    if resp.code != 200:
        raise ConnectionError(f"STATS at {endpoint} returned {resp.code}")
    return resp.json()


class MonitorEmitter:
    """Fire-and-forget UDP sender for monitoring records; never raises."""

    def __init__(self, addr: Optional[str]):
        self.addr = parse_hostport(addr) if addr else None
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM) if self.addr else None
        self._lock = threading.Lock()
        self.sent = 0
        self.failed = 0

    def emit(self, rec: MonitorRecord) -> None:
        if self._sock is None:
            return
        try:
            data = encode_monitor_record(rec)
            self._sock.sendto(data, self.addr)
        except (OSError, ValueError) as exc:
            log.debug("monitor emit failed: %s", exc)
            with self._lock:
                self.failed += 1
            return
        with self._lock:
            self.sent += 1

    def close(self):
        if self._sock is not None:
            self._sock.close()
