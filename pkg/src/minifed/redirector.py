"""Redirector: maps object paths to the live origin owning their namespace."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .model import (
    FederationTopology,
    InputError,
    OriginSpec,
    check_path,
    check_prefix,
    is_under,
    parse_hostport,
)
from .net import Service
from .origin import REGISTER_NAMESPACES, REGISTER_ORIGIN
from .protocol import Request, Response

LIVENESS_WINDOW_S = 30.0


class RegistrationError(Exception):
    pass


@dataclass
class _Registration:
    spec: OriginSpec
    last_seen: float


class Redirector(Service):
    name = "redirector"

    def __init__(self, topology: Optional[FederationTopology] = None,
                 bind: Optional[tuple[str, int]] = None,
                 clock: Callable[[], float] = time.monotonic,
                 liveness_s: float = LIVENESS_WINDOW_S):
        if bind is None:
            if topology is None:
                raise InputError("redirector needs a topology or a bind address")
            bind = parse_hostport(topology.redirector_endpoint)
        self.clock = clock
        self.liveness_s = liveness_s
        self._lock = threading.Lock()
        self._origins: dict[str, _Registration] = {}
        self._owners: dict[str, str] = {}
        self.locates = 0
        super().__init__(bind)

    def register_origin(self, spec: OriginSpec, now: Optional[float] = None) -> None:
        now = self.clock() if now is None else now
        for prefix in spec.namespaces:
            check_prefix(prefix)
        with self._lock:
            for prefix in spec.namespaces:
                owner = self._owners.get(prefix)
                if owner is not None and owner != spec.id:
                    raise RegistrationError(f"{prefix!r} already owned by {owner!r}")
            old = self._origins.get(spec.id)
            if old is not None:
                for prefix in old.spec.namespaces:
                    self._owners.pop(prefix, None)
            self._origins[spec.id] = _Registration(spec, now)
            for prefix in spec.namespaces:
                self._owners[prefix] = spec.id

    def _owner_of(self, path: str) -> Optional[_Registration]:
        best = None
        for prefix, owner in self._owners.items():
            if is_under(path, prefix) and (best is None or len(prefix) > len(best)):
                best = prefix
        return None if best is None else self._origins[self._owners[best]]

    def locate(self, path: str, now: Optional[float] = None) -> Response:
        now = self.clock() if now is None else now
        try:
            check_path(path)
        except InputError:
            return Response.status(404)
        with self._lock:
            reg = self._owner_of(path)
        if reg is None or now - reg.last_seen > self.liveness_s:
            return Response.status(404)
        return Response.redirect(reg.spec.endpoint)

    def prune_stale(self, now: Optional[float] = None) -> list[str]:
        now = self.clock() if now is None else now
        removed = []
        with self._lock:
            for oid, reg in list(self._origins.items()):
                if now - reg.last_seen > self.liveness_s:
                    removed.append(oid)
                    del self._origins[oid]
                    for prefix in reg.spec.namespaces:
                        if self._owners.get(prefix) == oid:
                            del self._owners[prefix]
        return removed

    def routes(self) -> dict[str, str]:
        with self._lock:
            return dict(self._owners)

    def handle(self, req: Request, peer: str) -> Response:
        if req.method == "LOCATE":
            with self._lock:
                self.locates += 1
            return self.locate(req.path)
        if req.method == "STATS":
            reg = req.header(REGISTER_ORIGIN)
            if reg is not None:
                return self._handle_register(reg, req.header(REGISTER_NAMESPACES) or "")
            with self._lock:
                body = {"origins": len(self._origins), "prefixes": len(self._owners),
                        "locates": self.locates, "active_connections": self.active_connections}
            return Response.ok_json(body)
        return Response.status(404)

    def _handle_register(self, reg: str, namespaces: str) -> Response:
        origin_id, _, endpoint = reg.partition(" ")
        prefixes = tuple(p for p in namespaces.split(",") if p)
        try:
            parse_hostport(endpoint)
            spec = OriginSpec(id=origin_id, endpoint=endpoint, root_dir="", namespaces=prefixes)
            if not origin_id or not prefixes:
                raise InputError("registration needs an id and namespaces")
            self.register_origin(spec)
        except (InputError, RegistrationError):
            return Response.status(403)
        return Response.ok_json({"registered": origin_id})
