"""Origin server: serves files from its root directory and emits f-stream records."""

from __future__ import annotations

import logging
import os
import threading
import time
import uuid
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

from .model import (
    FederationTopology,
    InputError,
    MonitorRecord,
    NamespaceSpec,
    check_path,
    now_ms,
    parse_hostport,
    resolve_namespace,
    token_from_header,
    verify_token,
)
from .net import MonitorEmitter, Service, call
from .protocol import Request, Response

log = logging.getLogger(__name__)

REGISTER_ORIGIN = "Register-Origin"
REGISTER_NAMESPACES = "Register-Namespaces"
HEARTBEAT_S = 10.0


def check_access(req: Request, path: str, ns: NamespaceSpec, secrets: dict, now_s: int) -> Optional[int]:
    """Return None when ``req`` may read ``path``, else the 401/403 status."""
    if ns.public:
        return None
    wire = token_from_header(req.header("Authorization"))
    if wire is None:
        return 401
    if not verify_token(wire, secrets.get(ns.prefix) or b"", path, now_s):
        return 403
    return None


@dataclass
class OriginCounters:
    requests_total: int = 0
    bytes_served: int = 0
    denied_total: int = 0
    active_connections: int = 0


class Origin(Service):
    name = "origin"

    def __init__(self, topology: FederationTopology, origin_id: str,
                 monitor_addr: Optional[str] = None, bind: Optional[tuple[str, int]] = None,
                 clock: Callable[[], int] = now_ms, heartbeat_s: float = HEARTBEAT_S,
                 register: bool = True):
        self.topology = topology
        self.spec = topology.origin(origin_id)
        self.root = Path(self.spec.root_dir)
        if not self.root.is_dir() or not os.access(self.root, os.R_OK | os.X_OK):
            raise InputError(f"origin {origin_id!r}: root_dir {self.root} is not a readable directory")
        self._real_root = os.path.realpath(self.root)
        self.secrets = {ns.prefix: ns.secret for ns in topology.namespaces if ns.secret}
        self.clock = clock
        self.monitor = MonitorEmitter(monitor_addr)
        self._lock = threading.Lock()
        self._counters = OriginCounters()
        self._heartbeat_s = heartbeat_s
        self._register = register
        self._stop = threading.Event()
        self._hb_thread: Optional[threading.Thread] = None
        super().__init__(bind or parse_hostport(self.spec.endpoint))

    @property
    def id(self) -> str:
        return self.spec.id

    # -- lifecycle ----------------------------------------------------------------

    def start(self):
        super().start()
        if self._register:
            self.register_now()
            self._hb_thread = threading.Thread(target=self._heartbeat, name=f"hb-{self.id}", daemon=True)
            self._hb_thread.start()
        return self

    def stop(self):
        self._stop.set()
        if self._hb_thread is not None:
            self._hb_thread.join()
        super().stop()
        self.monitor.close()

    def register_now(self) -> bool:
        req = Request("STATS", "", (
            (REGISTER_ORIGIN, f"{self.id} {self.address}"),
            (REGISTER_NAMESPACES, ",".join(self.spec.namespaces)),
        ))
        try:
            return call(self.topology.redirector_endpoint, req, timeout=2.0).code == 200
        except OSError as exc:
            log.debug("origin %s: registration failed: %s", self.id, exc)
            return False

    def _heartbeat(self):
        while not self._stop.wait(self._heartbeat_s):
            self.register_now()

    # -- request handling ------------------------------------------------------------

    def stats(self) -> OriginCounters:
        with self._lock:
            snap = OriginCounters(**asdict(self._counters))
        snap.active_connections = self.active_connections
        return snap

    def _count(self, **deltas):
        with self._lock:
            for k, v in deltas.items():
                setattr(self._counters, k, getattr(self._counters, k) + v)

    def handle(self, req: Request, peer: str):
        return self.serve_request(req, peer=peer)

    def resolve_file(self, path: str) -> Optional[str]:
        """Map an object path into root_dir; None if it would escape the root."""
        candidate = os.path.realpath(os.path.join(self._real_root, path.lstrip("/")))
        if os.path.commonpath([candidate, self._real_root]) != self._real_root:
            return None
        return candidate

    def serve_request(self, req: Request, now: Optional[int] = None, peer: str = ""):
        if req.method == "STATS":
            return Response.ok_json(asdict(self.stats()))
        self._count(requests_total=1)
        if req.method != "GET":
            return Response.status(404)
        try:
            path = check_path(req.path)
        except InputError:
            return Response.status(404)
        ns = resolve_namespace(path, self.topology.namespaces)
        if ns is None or ns.prefix not in self.spec.namespaces:
            return Response.status(404)
        now = self.clock() if now is None else now
        denied = check_access(req, path, ns, self.secrets, now // 1000)
        if denied:
            self._count(denied_total=1)
            return Response.status(denied)
        fs_path = self.resolve_file(path)
        if fs_path is None or not os.path.isfile(fs_path):
            return Response.status(404)

        client = req.header("X-Client") or peer
        xfer_id = uuid.uuid4().hex
        started = time.monotonic()
        self._emit("open", now, path, 0, client, xfer_id)
        try:
            with open(fs_path, "rb") as fh:
                body = fh.read()
        except OSError as exc:
            log.warning("origin %s: read of %s failed: %s", self.id, fs_path, exc)
            self._emit("close", self.clock(), path, 0, client, xfer_id, 0)
            return Response.status(500)

        def on_sent(nbytes: int, ok: bool):
            self._count(bytes_served=nbytes)
            duration = int((time.monotonic() - started) * 1000)
            self._emit("close", self.clock(), path, nbytes, client, xfer_id, duration)

        return Response.ok(body), on_sent

    def _emit(self, event, ts, path, nbytes, client, xfer_id, duration=None):
        self.monitor.emit(MonitorRecord(
            stream="f", ts_ms=ts, host=self.id, component="origin", event=event, path=path,
            bytes=nbytes, client=client, xfer_id=xfer_id, duration_ms=duration))
