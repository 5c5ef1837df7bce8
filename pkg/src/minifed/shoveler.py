"""Shoveler: UDP monitor datagrams -> bounded queue -> framed TCP to the collector.

Records leave the queue only once the collector acks their frame, so a
collector restart loses nothing that is still queued. When the queue is full
the oldest record is dropped to make room.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
from collections import deque
from dataclasses import asdict, dataclass
from typing import Optional

from .model import parse_hostport
from .net import Service, format_hostport
from .protocol import (
    ACK,
    MonitorCodecError,
    Request,
    Response,
    decode_monitor_record,
    encode_monitor_record,
    frame_write,
    read_exact,
)

log = logging.getLogger(__name__)

DEFAULT_QUEUE_BOUND = 10_000


@dataclass
class ShovelerCounters:
    received: int = 0
    forwarded: int = 0
    dropped: int = 0
    queue_depth: int = 0
    malformed: int = 0
    queue_bound: int = 0


class Backoff:
    """Doubling reconnect delay: base, 2*base, ... capped."""

    def __init__(self, base: float = 0.5, cap: float = 30.0):
        self.base = base
        self.cap = cap
        self.attempt = 0

    def next_delay(self) -> float:
        delay = min(self.base * (2 ** self.attempt), self.cap)
        self.attempt += 1
        return delay

    def reset(self):
        self.attempt = 0


class _UDPServer(socketserver.UDPServer):
    allow_reuse_address = True
    max_packet_size = 65535

    def server_bind(self):
        try:
            self.socket.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4 << 20)
        except OSError:
            pass
        super().server_bind()


class _UDPHandler(socketserver.BaseRequestHandler):
    def handle(self):
        self.server.shoveler.ingest(self.request[0])  # type: ignore[attr-defined]


class _Admin(Service):
    name = "shoveler-admin"

    def __init__(self, shoveler: "Shoveler", bind):
        self.shoveler = shoveler
        super().__init__(bind)

    def handle(self, req: Request, peer: str) -> Response:
        if req.method != "STATS":
            return Response.status(404)
        return Response.ok_json(asdict(self.shoveler.counters()))


class Shoveler:
    def __init__(self, collector_addr: str, udp_bind: tuple[str, int] = ("127.0.0.1", 0),
                 admin_bind: Optional[tuple[str, int]] = ("127.0.0.1", 0),
                 queue_bound: int = DEFAULT_QUEUE_BOUND, backoff_base: float = 0.5,
                 backoff_cap: float = 30.0, ack_timeout: float = 2.0):
        if queue_bound < 1:
            raise ValueError("queue bound must be at least 1")
        self.collector_addr = collector_addr
        self.queue_bound = queue_bound
        self.ack_timeout = ack_timeout
        self.backoff = Backoff(backoff_base, backoff_cap)
        self._queue: deque[tuple[int, bytes]] = deque()
        self._seq = 0
        self._cond = threading.Condition()
        self._c = ShovelerCounters(queue_bound=queue_bound)
        self._stop = threading.Event()
        self._drain_enabled = threading.Event()
        self._drain_enabled.set()
        self._conn: Optional[socket.socket] = None
        self._threads: list[threading.Thread] = []
        self._udp = _UDPServer(udp_bind, _UDPHandler)
        self._udp.shoveler = self  # type: ignore[attr-defined]
        self._admin = _Admin(self, admin_bind) if admin_bind is not None else None
        self.frames_sent = 0

    @property
    def udp_address(self) -> str:
        return format_hostport(self._udp.server_address)

    @property
    def admin_address(self) -> Optional[str]:
        return self._admin.address if self._admin else None

    # -- ingest ---------------------------------------------------------------------

    def ingest(self, datagram: bytes) -> bool:
        """Queue one datagram; returns False when it was malformed."""
        try:
            payload = encode_monitor_record(decode_monitor_record(datagram))
        except MonitorCodecError:
            with self._cond:
                self._c.malformed += 1
            return False
        with self._cond:
            self._c.received += 1
            if len(self._queue) >= self.queue_bound:
                self._queue.popleft()
                self._c.dropped += 1
            else:
                self._c.queue_depth += 1
            self._seq += 1
            self._queue.append((self._seq, payload))
            self._cond.notify_all()
        return True

    def counters(self) -> ShovelerCounters:
        with self._cond:
            return ShovelerCounters(**asdict(self._c))

    def queued_payloads(self) -> list[bytes]:
        with self._cond:
            return [p for _, p in self._queue]

    # -- drain ----------------------------------------------------------------------

    def pause_drain(self):
        self._drain_enabled.clear()

    def resume_drain(self):
        self._drain_enabled.set()
        with self._cond:
            self._cond.notify_all()

    def _next_item(self) -> Optional[tuple[int, bytes]]:
        with self._cond:
            while not self._queue and not self._stop.is_set() and self._drain_enabled.is_set():
                self._cond.wait(0.2)
            if self._stop.is_set() or not self._drain_enabled.is_set() or not self._queue:
                return None
            return self._queue[0]

    def _ack(self, seq: int):
        with self._cond:
            if self._queue and self._queue[0][0] == seq:
                self._queue.popleft()
                self._c.forwarded += 1
                self._c.queue_depth -= 1
            # otherwise the record was dropped as oldest while awaiting its ack

    def _close_conn(self):
        conn, self._conn = self._conn, None
        if conn is not None:
            try:
                conn.close()
            except OSError:
                pass

    def _connect(self) -> socket.socket:
        host, port = parse_hostport(self.collector_addr)
        sock = socket.create_connection((host, port), timeout=self.ack_timeout)
        sock.settimeout(self.ack_timeout)
        return sock

    def drain_once(self, sock: socket.socket) -> bool:
        """Send the head record and wait for its ack. False when nothing was sent."""
        item = self._next_item()
        if item is None:
            return False
        seq, payload = item
        sock.sendall(frame_write(payload))
        if read_exact(sock, 1) != ACK:
            raise ConnectionError("collector sent a bad ack byte")
        self.frames_sent += 1
        self._ack(seq)
        return True

    def _drain_loop(self):
        while not self._stop.is_set():
            if not self._drain_enabled.wait(0.2):
                continue
            with self._cond:
                idle = not self._queue
            if idle:
                self._next_item()
                continue
            try:
                if self._conn is None:
                    self._conn = self._connect()
                while self.drain_once(self._conn):
                    self.backoff.reset()
            except (OSError, ConnectionError) as exc:
                log.debug("shoveler: collector connection failed: %s", exc)
                self._close_conn()
                self._stop.wait(self.backoff.next_delay())

    # -- lifecycle --------------------------------------------------------------------

    def start(self):
        t_udp = threading.Thread(target=self._udp.serve_forever, kwargs={"poll_interval": 0.1},
                                 name="shoveler-udp", daemon=True)
        t_drain = threading.Thread(target=self._drain_loop, name="shoveler-drain", daemon=True)
        self._threads = [t_udp, t_drain]
        for t in self._threads:
            t.start()
        if self._admin:
            self._admin.start()
        return self

    def stop(self):
        self._stop.set()
        with self._cond:
            self._cond.notify_all()
        if self._threads:
            self._udp.shutdown()
        for t in self._threads:
            t.join()
        self._threads = []
        self._udp.server_close()
        self._close_conn()
        if self._admin:
            self._admin.stop()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
