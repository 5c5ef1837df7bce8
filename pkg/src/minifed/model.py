"""Domain types shared by every service: topology, paths, tokens, records."""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

F_EVENTS = ("open", "close")
G_EVENTS = ("hit", "miss", "evict")
COMPONENTS = ("cache", "origin")


class InputError(ValueError):
    """Raised for malformed caller input (paths, scopes, coordinates, ...)."""


class TopologyError(InputError):
    """Invalid federation topology; ``code`` names the violated rule."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def now_ms() -> int:
    return time.time_ns() // 1_000_000


# -- paths -------------------------------------------------------------------

_FORBIDDEN = set(chr(c) for c in range(0x21)) | {"\x7f", "\\"}


def check_path(path: str) -> str:
    """Validate an object path and return it unchanged.

    Paths are absolute, slash separated, with no empty, ``.`` or ``..``
    components and no whitespace or control characters.
    """
    if not isinstance(path, str) or not path.startswith("/"):
        raise InputError(f"path must be absolute: {path!r}")
    if any(ch in _FORBIDDEN for ch in path):
        raise InputError(f"path contains forbidden characters: {path!r}")
    if path == "/":
        return path
    parts = path[1:].split("/")
    for part in parts:
        if part in ("", ".", ".."):
            raise InputError(f"bad path component in {path!r}")
    return path


def check_prefix(prefix: str) -> str:
    check_path(prefix)
    if prefix != "/" and prefix.endswith("/"):
        raise InputError(f"prefix has trailing slash: {prefix!r}")
    return prefix


def is_under(path: str, prefix: str) -> bool:
    """True when ``prefix`` is a prefix of ``path`` at a component boundary."""
    if prefix == "/":
        return path.startswith("/")
    return path == prefix or path.startswith(prefix + "/")


# -- topology ----------------------------------------------------------------

def parse_hostport(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host or not port.isdigit() or int(port) > 65535:
        raise InputError(f"bad host:port {endpoint!r}")
    return host, int(port)


@dataclass(frozen=True)
class NamespaceSpec:
    prefix: str
    public: bool = True
    secret: Optional[bytes] = field(default=None, repr=False)


@dataclass(frozen=True)
class OriginSpec:
    id: str
    endpoint: str
    root_dir: str
    namespaces: tuple[str, ...]


@dataclass(frozen=True)
class CacheSpec:
    id: str
    endpoint: str
    latitude: float
    longitude: float
    capacity_bytes: int
    disk_dir: str


@dataclass(frozen=True)
class FederationTopology:
    origins: tuple[OriginSpec, ...]
    caches: tuple[CacheSpec, ...]
    redirector_endpoint: str
    namespaces: tuple[NamespaceSpec, ...]

    def __post_init__(self):
        validate_topology(self)

    def origin(self, origin_id: str) -> OriginSpec:
        for o in self.origins:
            if o.id == origin_id:
                return o
        raise KeyError(origin_id)

    def cache(self, cache_id: str) -> CacheSpec:
        for c in self.caches:
            if c.id == cache_id:
                return c
        raise KeyError(cache_id)

    def namespace(self, prefix: str) -> NamespaceSpec:
        for ns in self.namespaces:
            if ns.prefix == prefix:
                return ns
        raise KeyError(prefix)

    def owner_of(self, prefix: str) -> OriginSpec:
        for o in self.origins:
            if prefix in o.namespaces:
                return o
        raise KeyError(prefix)

    def with_endpoint(self, service_id: str, endpoint: str) -> "FederationTopology":
        """Copy with one origin/cache endpoint (or ``"redirector"``) replaced."""
        if service_id == "redirector":
            return replace(self, redirector_endpoint=endpoint)
        origins = tuple(replace(o, endpoint=endpoint) if o.id == service_id else o
                        for o in self.origins)
        caches = tuple(replace(c, endpoint=endpoint) if c.id == service_id else c
                       for c in self.caches)
        return replace(self, origins=origins, caches=caches)


def validate_topology(topo: FederationTopology) -> None:
    ids = [o.id for o in topo.origins] + [c.id for c in topo.caches]
    seen: set[str] = set()
    for sid in ids:
        if not sid:
            raise TopologyError("empty-id", "service id must be non-empty")
        if sid in seen:
            raise TopologyError("duplicate-id", f"service id {sid!r} used twice")
        seen.add(sid)

    prefixes: set[str] = set()
    for ns in topo.namespaces:
        try:
            check_prefix(ns.prefix)
        except InputError as exc:
            raise TopologyError("bad-prefix", str(exc)) from None
        if ns.prefix in prefixes:
            raise TopologyError("duplicate-prefix", f"namespace {ns.prefix!r} listed twice")
        prefixes.add(ns.prefix)
        if not ns.public and not ns.secret:
            raise TopologyError("missing-secret", f"protected namespace {ns.prefix!r} has no secret")
        if ns.public and ns.secret:
            raise TopologyError("unexpected-secret", f"public namespace {ns.prefix!r} carries a secret")

    claimed: dict[str, str] = {}
    for o in topo.origins:
        if not o.namespaces:
            raise TopologyError("no-namespaces", f"origin {o.id!r} claims no namespace")
        for p in o.namespaces:
            if p not in prefixes:
                raise TopologyError("unknown-namespace", f"origin {o.id!r} claims unregistered {p!r}")
            if p in claimed:
                raise TopologyError("multiply-claimed",
                                    f"{p!r} claimed by {claimed[p]!r} and {o.id!r}")
            claimed[p] = o.id
    for p in prefixes:
        if p not in claimed:
            raise TopologyError("unclaimed-namespace", f"no origin claims {p!r}")

    for c in topo.caches:
        if not -90 <= c.latitude <= 90 or not -180 <= c.longitude <= 180:
            raise TopologyError("bad-coordinates", f"cache {c.id!r} coordinates out of range")
        if c.capacity_bytes <= 0:
            raise TopologyError("bad-capacity", f"cache {c.id!r} capacity must be positive")


def topology_from_dict(data: dict, base_dir: Optional[Path] = None) -> FederationTopology:
    """Build a topology from its JSON form.

    Relative ``root_dir``/``disk_dir`` values are resolved against ``base_dir``.
    """
    def _dir(p: str) -> str:
        if base_dir is not None and not Path(p).is_absolute():
            return str((base_dir / p).resolve())
        return p

    try:
        namespaces = []
        for ns in data["namespaces"]:
            secret = ns.get("secret")
            namespaces.append(NamespaceSpec(
                prefix=ns["prefix"],
                public=bool(ns.get("public", True)),
                secret=base64.b64decode(secret, validate=True) if secret else None,
            ))
        origins = tuple(
            OriginSpec(id=o["id"], endpoint=o["endpoint"], root_dir=_dir(o["root_dir"]),
                       namespaces=tuple(o["namespaces"]))
            for o in data["origins"])
        caches = tuple(
            CacheSpec(id=c["id"], endpoint=c["endpoint"], latitude=float(c["latitude"]),
                      longitude=float(c["longitude"]), capacity_bytes=int(c["capacity_bytes"]),
                      disk_dir=_dir(c["disk_dir"]))
            for c in data["caches"])
        redirector = data["redirector"]
    except (KeyError, TypeError) as exc:
        raise TopologyError("malformed", f"missing or invalid field: {exc}") from None
    except binascii.Error as exc:
        raise TopologyError("malformed", f"secret is not base64: {exc}") from None
    return FederationTopology(origins=origins, caches=caches,
                              redirector_endpoint=redirector, namespaces=tuple(namespaces))


def topology_to_dict(topo: FederationTopology) -> dict:
    return {
        "origins": [{"id": o.id, "endpoint": o.endpoint, "root_dir": o.root_dir,
                     "namespaces": list(o.namespaces)} for o in topo.origins],
        "caches": [{"id": c.id, "endpoint": c.endpoint, "latitude": c.latitude,
                    "longitude": c.longitude, "capacity_bytes": c.capacity_bytes,
                    "disk_dir": c.disk_dir} for c in topo.caches],
        "redirector": topo.redirector_endpoint,
        "namespaces": [
            {"prefix": ns.prefix, "public": ns.public,
             **({"secret": base64.b64encode(ns.secret).decode()} if ns.secret else {})}
            for ns in topo.namespaces],
    }


def load_topology(path: str | Path) -> FederationTopology:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        data = json.load(fh)
    return topology_from_dict(data, base_dir=path.parent)


def resolve_namespace(path: str, table: Iterable[NamespaceSpec]) -> Optional[NamespaceSpec]:
    """Longest registered prefix of ``path`` at a component boundary."""
    check_path(path)
    best = None
    for ns in table:
        if is_under(path, ns.prefix) and (best is None or len(ns.prefix) > len(best.prefix)):
            best = ns
    return best


# -- tokens ------------------------------------------------------------------

def _b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def _unb64url(text: str) -> bytes:
    if not text or any(ch not in _B64URL_ALPHABET for ch in text):
        raise ValueError("not base64url")
    data = base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))
    # reject aliases that differ only in the unused low bits of the last character
    if _b64url(data) != text:
        raise ValueError("non-canonical base64url")
    return data


_B64URL_ALPHABET = frozenset("ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_")


def _scope_prefix(scope: str) -> str:
    kind, sep, prefix = scope.partition(":")
    if kind != "read" or not sep:
        raise InputError(f"only read scopes are supported: {scope!r}")
    return check_prefix(prefix)


@dataclass(frozen=True)
class AccessToken:
    subject: str
    scopes: tuple[str, ...]
    expiry: int
    signature: bytes = field(repr=False)

    def payload(self) -> bytes:
        return token_payload(self.subject, self.scopes, self.expiry)


def token_payload(subject: str, scopes: Sequence[str], expiry: int) -> bytes:
    body = {"sub": subject, "scopes": list(scopes), "exp": int(expiry)}
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")


def mint_token(subject: str, scopes: Sequence[str], expiry: int, secret: bytes) -> str:
    """Return the wire form ``b64url(payload).b64url(hmac_sha256(secret, payload))``."""
    if not secret:
        raise InputError("token secret must be non-empty")
    for scope in scopes:
        _scope_prefix(scope)
    payload = token_payload(subject, scopes, expiry)
    mac = hmac.new(secret, payload, hashlib.sha256).digest()
    return f"{_b64url(payload)}.{_b64url(mac)}"


def parse_token(wire: str) -> tuple[AccessToken, bytes]:
    """Split a wire token into its decoded value and the exact payload bytes.

    Raises ValueError on any structural problem.
    """
    head, sep, tail = wire.partition(".")
    if not sep or "." in tail:
        raise ValueError("token must have exactly two parts")
    payload = _unb64url(head)
    sig = _unb64url(tail)
    if len(sig) != 32:
        raise ValueError("signature must be 32 bytes")
    body = json.loads(payload.decode("utf-8"))
    if not isinstance(body, dict) or set(body) != {"sub", "scopes", "exp"}:
        raise ValueError("unexpected payload fields")
    sub, scopes, exp = body["sub"], body["scopes"], body["exp"]
    if not isinstance(sub, str) or not isinstance(exp, int) or isinstance(exp, bool):
        raise ValueError("bad payload types")
    if not isinstance(scopes, list) or not all(isinstance(s, str) for s in scopes):
        raise ValueError("bad scopes")
    return AccessToken(sub, tuple(scopes), exp, sig), payload


class Decision:
    """Outcome of token verification; truthy only for ``allow``."""

    __slots__ = ("reason",)

    def __init__(self, reason: Optional[str]):
        self.reason = reason

    @property
    def allowed(self) -> bool:
        return self.reason is None

    def __bool__(self):
        return self.allowed

    def __eq__(self, other):
        return isinstance(other, Decision) and other.reason == self.reason

    def __repr__(self):
        return "allow" if self.allowed else f"deny({self.reason})"


ALLOW = Decision(None)
DENY_MALFORMED = Decision("malformed")
DENY_BAD_SIGNATURE = Decision("bad-signature")
DENY_EXPIRED = Decision("expired")
DENY_OUT_OF_SCOPE = Decision("out-of-scope")


def verify_token(wire: str, secret: bytes, path: str, now: int) -> Decision:
    try:
        token, payload = parse_token(wire)
    except (ValueError, UnicodeDecodeError):
        return DENY_MALFORMED
    expected = hmac.new(secret or b"", payload, hashlib.sha256).digest()
    if not secret or not hmac.compare_digest(expected, token.signature):
        return DENY_BAD_SIGNATURE
    if token.expiry <= now:
        return DENY_EXPIRED
    for scope in token.scopes:
        try:
            prefix = _scope_prefix(scope)
        except InputError:
            continue
        if is_under(path, prefix):
            return ALLOW
    return DENY_OUT_OF_SCOPE


def bearer(wire: str) -> str:
    return f"Bearer {wire}"


def token_from_header(value: Optional[str]) -> Optional[str]:
    if value is None:
        return None
    scheme, _, rest = value.partition(" ")
    if scheme.lower() != "bearer":
        return ""
    return rest.strip()


# -- monitoring records ------------------------------------------------------

@dataclass(frozen=True)
class MonitorRecord:
    stream: str
    ts_ms: int
    host: str
    component: str
    event: str
    path: str
    bytes: int
    client: str
    xfer_id: str
    duration_ms: Optional[int] = None

    def __post_init__(self):
        if self.stream == "f":
            if self.event not in F_EVENTS:
                raise ValueError(f"f-stream event must be open/close, got {self.event!r}")
        elif self.stream == "g":
            if self.event not in G_EVENTS:
                raise ValueError(f"g-stream event must be hit/miss/evict, got {self.event!r}")
        else:
            raise ValueError(f"unknown stream {self.stream!r}")
        if self.component not in COMPONENTS:
            raise ValueError(f"unknown component {self.component!r}")
        for name in ("ts_ms", "bytes"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ValueError(f"{name} must be a non-negative integer")
        if self.duration_ms is not None:
            if self.event != "close" or self.stream != "f":
                raise ValueError("duration_ms is only valid on f-close records")
            if not isinstance(self.duration_ms, int) or isinstance(self.duration_ms, bool) \
                    or self.duration_ms < 0:
                raise ValueError("duration_ms must be a non-negative integer")
        for name in ("host", "client", "xfer_id", "path"):
            if not isinstance(getattr(self, name), str):
                raise ValueError(f"{name} must be a string")
        if not self.host or not self.xfer_id:
            raise ValueError("host and xfer_id must be non-empty")
        if not self.path.startswith("/"):
            raise ValueError("path must be absolute")

    def dedup_key(self) -> tuple:
        if self.stream == "f":
            return ("f", self.host, self.xfer_id, self.event)
        return ("g", self.host, self.event, self.ts_ms, self.path, self.xfer_id)
