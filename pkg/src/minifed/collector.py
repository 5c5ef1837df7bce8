"""Collector: receives framed records, dedups them, appends to a JSON-lines log."""

from __future__ import annotations

import json
import logging
import os
import socket
import socketserver
import threading
from pathlib import Path
from typing import Iterator, Optional

from .model import MonitorRecord
from .net import format_hostport
from .protocol import (
    ACK,
    FrameConnectionError,
    FrameError,
    MonitorCodecError,
    decode_monitor_record,
    encode_monitor_record,
    frame_read,
    record_from_dict,
)

log = logging.getLogger(__name__)

STORED = "stored"
DUPLICATE = "duplicate"
REJECTED = "rejected"


def iter_log(path: str | Path) -> Iterator[Optional[MonitorRecord]]:
    """Yield one record per log line, or None for a corrupt line."""
    path = Path(path)
    if not path.exists():
        return
    with path.open("rb") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                yield record_from_dict(json.loads(line.decode("utf-8")))
            except (ValueError, UnicodeDecodeError, MonitorCodecError):
                yield None


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True
    block_on_close = False


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        collector: Collector = self.server.collector  # type: ignore[attr-defined]
        sock: socket.socket = self.request
        collector._track(sock, True)
        try:
            while not collector._stopping.is_set():
                if not collector._running.wait(0.1):
                    continue
                try:
                    payload = frame_read(sock)
                except (FrameConnectionError, FrameError, OSError):
                    return
                collector.handle_frame(payload)
                if collector._should_crash():
                    collector._crash()
                    return
                sock.sendall(ACK)
        except OSError:
            pass
        finally:
            collector._track(sock, False)


class Collector:
    """Append-only record store fed over framed TCP.

    ``crash_after_stores`` is a test hook: after that many new records are
    appended the collector shuts down without acking the last frame.
    """

    def __init__(self, log_path: str | Path, bind: tuple[str, int] = ("127.0.0.1", 0),
                 crash_after_stores: Optional[int] = None, fsync: bool = False):
        self.log_path = Path(log_path)
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self.crash_after_stores = crash_after_stores
        self.stored = 0
        self.duplicates = 0
        self.rejected = 0
        self.frames = 0
        self.corrupt_lines = 0
        self._lock = threading.Lock()
        self._seen: set[tuple] = set()
        for rec in iter_log(self.log_path):
            if rec is None:
                self.corrupt_lines += 1
            else:
                self._seen.add(rec.dedup_key())
        self._fh = self.log_path.open("ab")
        self._running = threading.Event()
        self._running.set()
        self._stopping = threading.Event()
        self._conns: set[socket.socket] = set()
        self._server = _Server(bind, _Handler)
        self._server.collector = self  # type: ignore[attr-defined]
        self._thread: Optional[threading.Thread] = None
        self.crashed = threading.Event()
        self._stop_lock = threading.Lock()

    @property
    def address(self) -> str:
        return format_hostport(self._server.server_address)

    def handle_frame(self, payload: bytes) -> str:
        try:
            rec = decode_monitor_record(payload)
        except MonitorCodecError as exc:
            log.debug("collector: rejected frame: %s", exc)
            with self._lock:
                self.frames += 1
                self.rejected += 1
            return REJECTED
        key = rec.dedup_key()
        with self._lock:
            if self._fh.closed:
                raise ConnectionError("collector is shut down")
            self.frames += 1
            if key in self._seen:
                self.duplicates += 1
                return DUPLICATE
            self._fh.write(encode_monitor_record(rec) + b"\n")
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())
            self._seen.add(key)
            self.stored += 1
        return STORED

    def counters(self) -> dict:
        with self._lock:
            return {"stored": self.stored, "duplicates": self.duplicates,
                    "rejected": self.rejected, "frames": self.frames,
                    "corrupt_lines": self.corrupt_lines}

    # -- stall / crash hooks -------------------------------------------------------------

    def pause(self):
        """Stop reading and acking frames; connections stay open."""
        self._running.clear()

    def resume(self):
        self._running.set()

    def _should_crash(self) -> bool:
        with self._lock:
            return self.crash_after_stores is not None and self.stored >= self.crash_after_stores

    def _crash(self):
        if not self.crashed.is_set():
            self.crashed.set()
            threading.Thread(target=self.stop, name="collector-crash", daemon=True).start()

    def _track(self, sock, add: bool):
        with self._lock:
            if add:
                self._conns.add(sock)
            else:
                self._conns.discard(sock)

    # -- lifecycle -----------------------------------------------------------------------

    def start(self):
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        kwargs={"poll_interval": 0.1},
                                        name="collector", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._stopping.set()
        with self._stop_lock:
            if self._thread is not None:
                self._server.shutdown()
                self._thread.join()
                self._thread = None
            self._server.server_close()
        with self._lock:
            conns = list(self._conns)
        for sock in conns:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        with self._lock:
            if not self._fh.closed:
                self._fh.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
