"""Disk cache in front of origins, with LRU eviction and miss coalescing."""

from __future__ import annotations

import logging
import os
import tempfile
import threading
import time
import uuid
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

from .model import (
    FederationTopology,
    InputError,
    MonitorRecord,
    check_path,
    now_ms,
    parse_hostport,
    resolve_namespace,
)
from .net import MonitorEmitter, Service, call
from .origin import check_access
from .protocol import ProtocolError, Request, Response

log = logging.getLogger(__name__)

_TMP_PREFIX = ".minifed-tmp-"


class AdmissionRefused(Exception):
    pass


@dataclass
class CacheEntry:
    path: str
    size_bytes: int
    last_access_ms: int
    disk_file: str = ""


class LRUIndex:
    """Capacity-bounded entry index ordered from least to most recently accessed."""

    def __init__(self, capacity_bytes: int):
        if capacity_bytes <= 0:
            raise InputError("capacity must be positive")
        self.capacity_bytes = capacity_bytes
        self._entries: OrderedDict[str, CacheEntry] = OrderedDict()
        self.total_bytes = 0

    def __contains__(self, path):
        return path in self._entries

    def __len__(self):
        return len(self._entries)

    def get(self, path: str) -> Optional[CacheEntry]:
        return self._entries.get(path)

    def entries(self) -> list[CacheEntry]:
        return list(self._entries.values())

    def touch(self, path: str, now: int) -> Optional[CacheEntry]:
        entry = self._entries.get(path)
        if entry is not None:
            entry.last_access_ms = now
            self._entries.move_to_end(path)
        return entry

    def remove(self, path: str) -> Optional[CacheEntry]:
        entry = self._entries.pop(path, None)
        if entry is not None:
            self.total_bytes -= entry.size_bytes
        return entry

    def admit(self, path: str, size_bytes: int, now: int, disk_file: str = "") -> list[CacheEntry]:
        """Insert ``path``, evicting oldest entries until it fits. Returns the evicted."""
        if size_bytes > self.capacity_bytes:
            raise AdmissionRefused(f"{path}: {size_bytes} bytes exceeds capacity {self.capacity_bytes}")
        self.remove(path)
        evicted = []
        while self.total_bytes + size_bytes > self.capacity_bytes:
            _, victim = self._entries.popitem(last=False)
            self.total_bytes -= victim.size_bytes
            evicted.append(victim)
        self._entries[path] = CacheEntry(path, size_bytes, now, disk_file)
        self.total_bytes += size_bytes
        return evicted


@dataclass
class CacheCounters:
    requests_total: int = 0
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    bytes_served: int = 0
    bytes_cached: int = 0
    active_connections: int = 0


class _Fetch:
    def __init__(self):
        self.done = threading.Event()
        self.response: Optional[Response] = None


class Cache(Service):
    name = "cache"

    def __init__(self, topology: FederationTopology, cache_id: str,
                 monitor_addr: Optional[str] = None, bind: Optional[tuple[str, int]] = None,
                 clock: Callable[[], int] = now_ms, upstream_timeout: float = 5.0):
        self.topology = topology
        self.spec = topology.cache(cache_id)
        self.disk_dir = Path(self.spec.disk_dir)
        self.disk_dir.mkdir(parents=True, exist_ok=True)
        self.secrets = {ns.prefix: ns.secret for ns in topology.namespaces if ns.secret}
        self.clock = clock
        self.upstream_timeout = upstream_timeout
        self.monitor = MonitorEmitter(monitor_addr)
        self.index = LRUIndex(self.spec.capacity_bytes)
        self._index_lock = threading.RLock()
        self._lock = threading.Lock()
        self._counters = CacheCounters()
        self._inflight: dict[str, _Fetch] = {}
        self._inflight_lock = threading.Lock()
        self._scan_disk()
        super().__init__(bind or parse_hostport(self.spec.endpoint))

    @property
    def id(self) -> str:
        return self.spec.id

    def stop(self):
        super().stop()
        self.monitor.close()

    # -- disk ----------------------------------------------------------------------

    def disk_file(self, path: str) -> Path:
        return self.disk_dir / path.lstrip("/")

    def _scan_disk(self):
        now = self.clock()
        found = []
        for root, _dirs, files in os.walk(self.disk_dir):
            for name in files:
                full = Path(root) / name
                if name.startswith(_TMP_PREFIX):
                    full.unlink(missing_ok=True)
                    continue
                rel = "/" + full.relative_to(self.disk_dir).as_posix()
                found.append((rel, full))
        for rel, full in sorted(found):
            try:
                check_path(rel)
                size = full.stat().st_size
                evicted = self.index.admit(rel, size, now, str(full))
            except (InputError, AdmissionRefused, OSError):
                full.unlink(missing_ok=True)
                continue
            for victim in evicted:
                Path(victim.disk_file).unlink(missing_ok=True)

    def _write(self, path: str, body: bytes) -> str:
        target = self.disk_file(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=_TMP_PREFIX, dir=target.parent)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(body)
            os.replace(tmp, target)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        return str(target)

    def admit(self, path: str, size_bytes: int, now: int, body: Optional[bytes] = None) -> list[str]:
        """Make room for ``path`` and record it; writes ``body`` to disk when given."""
        with self._index_lock:
            evicted = self.index.admit(path, size_bytes, now, str(self.disk_file(path)))
            for victim in evicted:
                Path(victim.disk_file).unlink(missing_ok=True)
                self._emit_g("evict", now, victim.path, victim.size_bytes, "", uuid.uuid4().hex)
            if body is not None:
                try:
                    self._write(path, body)
                except OSError:
                    self.index.remove(path)
                    raise
        if evicted:
            self._count(evictions=len(evicted))
        return [v.path for v in evicted]

    # -- counters ------------------------------------------------------------------------

    def stats(self) -> CacheCounters:
        with self._lock:
            snap = CacheCounters(**asdict(self._counters))
        with self._index_lock:
            snap.bytes_cached = self.index.total_bytes
        snap.active_connections = self.active_connections
        return snap

    def _count(self, **deltas):
        with self._lock:
            for k, v in deltas.items():
                setattr(self._counters, k, getattr(self._counters, k) + v)

    # -- request handling ---------------------------------------------------------------

    def handle(self, req: Request, peer: str):
        if req.method == "STATS":
            body = asdict(self.stats())
            body["entries"] = len(self.index)
            return Response.ok_json(body)
        return self.handle_get(req, peer=peer)

    def _read_hit(self, path: str, now: int) -> Optional[bytes]:
        with self._index_lock:
            entry = self.index.touch(path, now)
            if entry is None:
                return None
            try:
                with open(entry.disk_file, "rb") as fh:
                    return fh.read()
            except OSError:
                self.index.remove(path)
                return None

    def handle_get(self, req: Request, now: Optional[int] = None, peer: str = ""):
        self._count(requests_total=1)
        if req.method != "GET":
            return Response.status(404)
        try:
            path = check_path(req.path)
        except InputError:
            return Response.status(404)
        ns = resolve_namespace(path, self.topology.namespaces)
        if ns is None:
            return Response.status(404)
        now = self.clock() if now is None else now
        denied = check_access(req, path, ns, self.secrets, now // 1000)
        if denied:
            return Response.status(denied)

        client = req.header("X-Client") or peer
        body = self._read_hit(path, now)
        if body is not None:
            return self._serve(path, body, "HIT", now, client)

        with self._inflight_lock:
            fetch = self._inflight.get(path)
            leader = fetch is None
            if leader:
                fetch = self._inflight[path] = _Fetch()
        if leader:
            try:
                fetch.response = self._fetch_and_admit(path, req.header("Authorization"), now)
            finally:
                with self._inflight_lock:
                    del self._inflight[path]
                fetch.done.set()
        else:
            fetch.done.wait()
        resp = fetch.response or Response.status(500)
        if resp.code != 200:
            return resp
        return self._serve(path, resp.body, "MISS", now, client)

    def _fetch_and_admit(self, path: str, auth: Optional[str], now: int) -> Response:
        try:
            loc = call(self.topology.redirector_endpoint, Request("LOCATE", path),
                       timeout=self.upstream_timeout)
        except (OSError, ProtocolError) as exc:
            log.info("cache %s: redirector unreachable: %s", self.id, exc)
            return Response.status(500)
        if loc.code == 404:
            return Response.status(404)
        if loc.code != 302:
            return Response.status(500)
        headers = (("Authorization", auth),) if auth else ()
        headers += (("X-Client", self.id),)
        try:
            resp = call(loc.header("Location"), Request("GET", path, headers),
                        timeout=self.upstream_timeout)
        except (OSError, ProtocolError) as exc:
            log.info("cache %s: origin unreachable: %s", self.id, exc)
            return Response.status(500)
        if resp.code in (401, 403, 404):
            return Response.status(resp.code)
        if resp.code != 200:
            return Response.status(500)
        try:
            self.admit(path, len(resp.body), now, resp.body)
        except AdmissionRefused:
            log.info("cache %s: %s larger than capacity, serving pass-through", self.id, path)
        except OSError as exc:
            log.warning("cache %s: could not store %s: %s", self.id, path, exc)
        return Response.ok(resp.body)

    def _serve(self, path: str, body: bytes, status: str, now: int, client: str):
        xfer_id = uuid.uuid4().hex
        if status == "HIT":
            self._count(hits=1)
        else:
            self._count(misses=1)
        self._emit_g(status.lower(), now, path, len(body), client, xfer_id)
        self._emit_f("open", now, path, 0, client, xfer_id)
        started = time.monotonic()

        def on_sent(nbytes: int, ok: bool):
            self._count(bytes_served=nbytes)
            duration = int((time.monotonic() - started) * 1000)
            self._emit_f("close", self.clock(), path, nbytes, client, xfer_id, duration)

        return Response.ok(body, ("X-Cache", status)), on_sent

    def _emit_g(self, event, ts, path, nbytes, client, xfer_id):
        self.monitor.emit(MonitorRecord(
            stream="g", ts_ms=ts, host=self.id, component="cache", event=event, path=path,
            bytes=nbytes, client=client, xfer_id=xfer_id))

    def _emit_f(self, event, ts, path, nbytes, client, xfer_id, duration=None):
        self.monitor.emit(MonitorRecord(
            stream="f", ts_ms=ts, host=self.id, component="cache", event=event, path=path,
            bytes=nbytes, client=client, xfer_id=xfer_id, duration_ms=duration))
