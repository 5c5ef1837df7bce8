"""In-process federation for integration tests, demos, and fault injection.

All services run as threads on ephemeral loopback ports. A seeded RNG drives
object contents and workloads, so two runs with one seed produce identical
traces (timing fields aside).
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import shutil
import tempfile
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

from .accounting import aggregate
from .cache import Cache
from .client import DeliveryError, FetchFailed, fetch
from .collector import Collector, iter_log
from .healthcheck import HealthReport, SuiteState, run_suite
from .model import (
    CacheSpec,
    FederationTopology,
    InputError,
    MonitorRecord,
    NamespaceSpec,
    OriginSpec,
    is_under,
    mint_token,
    now_ms,
    parse_hostport,
    topology_from_dict,
)
from .origin import Origin
from .protocol import encode_monitor_record
from .redirector import Redirector
from .shoveler import DEFAULT_QUEUE_BOUND, Shoveler

log = logging.getLogger(__name__)

PROBE_NS = "/_probe"
PROBE_PRIVATE_NS = "/_probe_private"
PROBE_FILE = "probe.bin"
RATE_FILE = "rate.bin"
PROBE_SIZE = 64 * 1024
RATE_PROBE_SIZE = 1024 * 1024

# Namespace names follow the project mix of a production federation.
USER_NAMESPACES = ("/ligo", "/nova", "/minerva", "/dune", "/uboone", "/osg")
PROTECTED_USER_NAMESPACES = ("/ligo",)

# (id, lat, lon) of the sites used for synthetic caches.
CACHE_SITES = (
    ("sdsc", 32.88, -117.23),
    ("unl", 40.82, -96.70),
    ("mghpcc", 42.20, -72.62),
    ("boise", 43.62, -116.20),
    ("jacksonville", 30.33, -81.66),
    ("denver", 39.74, -104.99),
    ("tokyo", 35.71, 139.76),
    ("ncar", 40.04, -105.25),
)

FAULT_KINDS = ("kill_redirector", "kill_origin", "kill_cache", "stall_collector",
               "fill_shoveler_queue", "corrupt_namespace_secret")


class HarnessError(RuntimeError):
    pass


class SimClock:
    """Wall clock in ms that a workload can pin to simulated instants."""

    def __init__(self):
        self.override: Optional[int] = None

    def __call__(self) -> int:
        return self.override if self.override is not None else now_ms()


def _secret(rng: random.Random) -> bytes:
    return bytes(rng.getrandbits(8) for _ in range(32))


def build_topology(base_dir: Union[str, Path], n_origins: int = 1, n_caches: int = 1,
                   user_namespaces: Sequence[str] = USER_NAMESPACES,
                   protected: Sequence[str] = PROTECTED_USER_NAMESPACES,
                   cache_capacity: int = 64 << 20, seed: int = 0) -> FederationTopology:
    """A loopback topology with probe namespaces and round-robin user namespaces.

    Origin 1 owns ``/_probe`` and ``/_probe_private``; every further origin
    owns ``/_probe/<origin-id>``. Endpoints use port 0 until spawned.
    """
    if n_origins < 1 or n_caches < 1 or n_caches > len(CACHE_SITES):
        raise InputError("need at least one origin and between one and eight caches")
    rng = random.Random(f"topology-{seed}")
    base = Path(base_dir)
    origin_ids = [f"origin-{i + 1}" for i in range(n_origins)]
    owned: dict[str, list[str]] = {oid: [] for oid in origin_ids}
    owned[origin_ids[0]] += [PROBE_NS, PROBE_PRIVATE_NS]
    for oid in origin_ids[1:]:
        owned[oid].append(f"{PROBE_NS}/{oid}")
    for i, ns in enumerate(user_namespaces):
        owned[origin_ids[i % n_origins]].append(ns)

    namespaces = []
    for oid in origin_ids:
        for prefix in owned[oid]:
            is_protected = prefix == PROBE_PRIVATE_NS or prefix in protected
            namespaces.append(NamespaceSpec(prefix, public=not is_protected,
                                            secret=_secret(rng) if is_protected else None))
    origins = tuple(OriginSpec(oid, "127.0.0.1:0", str(base / "origins" / oid), tuple(owned[oid]))
                    for oid in origin_ids)
    caches = tuple(CacheSpec(f"cache-{site}", "127.0.0.1:0", lat, lon, cache_capacity,
                             str(base / "caches" / f"cache-{site}"))
                   for site, lat, lon in CACHE_SITES[:n_caches])
    return FederationTopology(origins, caches, "127.0.0.1:0", tuple(namespaces))


def populate_origins(topology: FederationTopology, seed: int = 0,
                     objects_per_namespace: int = 20, max_object_size: int = 8192) -> dict[str, bytes]:
    """Write probe and user objects under each origin root; returns path -> content."""
    rng = random.Random(f"objects-{seed}")
    objects: dict[str, bytes] = {}
    for origin in topology.origins:
        root = Path(origin.root_dir)
        for prefix in origin.namespaces:
            if prefix == PROBE_NS or prefix.startswith(PROBE_NS + "/"):
                objects[f"{prefix}/{PROBE_FILE}"] = rng.randbytes(PROBE_SIZE)
                if prefix == PROBE_NS:
                    objects[f"{prefix}/{RATE_FILE}"] = rng.randbytes(RATE_PROBE_SIZE)
            elif prefix == PROBE_PRIVATE_NS:
                objects[f"{prefix}/{PROBE_FILE}"] = rng.randbytes(PROBE_SIZE)
            else:
                for i in range(objects_per_namespace):
                    size = rng.randint(1, max_object_size)
                    objects[f"{prefix}/obj-{i:04d}.dat"] = rng.randbytes(size)
        for path, data in objects.items():
            ns_owned = any(is_under(path, p) for p in origin.namespaces)
            if ns_owned and _owner(topology, path) == origin.id:
                target = root / path.lstrip("/")
                target.parent.mkdir(parents=True, exist_ok=True)
                target.write_bytes(data)
    return objects


def _owner(topology: FederationTopology, path: str) -> Optional[str]:
    best, owner = "", None
    for o in topology.origins:
        for p in o.namespaces:
            if is_under(path, p) and len(p) > len(best):
                best, owner = p, o.id
    return owner


# -- workload traces --------------------------------------------------------------------

@dataclass
class TraceEntry:
    step: int
    at_ms: int
    path: str
    code: int
    cache_status: str
    served_by: str
    bytes: int
    sha256: str
    rate_bytes_per_s: float = 0.0


class Trace(list):
    def dumps(self, timing: bool = False) -> bytes:
        """JSON lines; wall-clock rates are left out unless ``timing``."""
        lines = []
        for e in self:
            d = asdict(e)
            if not timing:
                d.pop("rate_bytes_per_s")
            lines.append(json.dumps(d, sort_keys=True))
        return ("\n".join(lines) + "\n").encode() if lines else b""

    def totals(self) -> tuple[int, int]:
        ok = [e for e in self if e.code == 200]
        return len(ok), sum(e.bytes for e in ok)


def zipf_script(fed: "Federation", n: int, seed: int = 0, start_ms: int = 1_672_531_200_000,
                span_ms: int = 180 * 86_400_000, exponent: float = 1.1,
                namespaces: Optional[Sequence[str]] = None) -> list[dict]:
    """``n`` requests over user namespaces, Zipf-weighted by namespace and object rank."""
    rng = random.Random(f"zipf-{seed}")
    namespaces = list(namespaces or [p for p in USER_NAMESPACES
                                     if any(p == ns.prefix for ns in fed.topology.namespaces)])
    by_ns = {p: sorted(k for k in fed.objects if is_under(k, p)) for p in namespaces}
    ns_weights = [1 / (k + 1) ** exponent for k in range(len(namespaces))]
    step = max(1, span_ms // max(n, 1))
    script = []
    for i in range(n):
        prefix = rng.choices(namespaces, ns_weights)[0]
        objs = by_ns[prefix]
        path = rng.choices(objs, [1 / (k + 1) ** exponent for k in range(len(objs))])[0]
        at_ms = start_ms + i * step
        lat, lon = rng.uniform(25, 49), rng.uniform(-124, -67)
        entry = {"at_ms": at_ms, "client_loc": (round(lat, 4), round(lon, 4)), "path": path}
        ns = fed.topology.namespace(prefix)
        if not ns.public:
            entry["token"] = mint_token(f"user-{i % 7}", [f"read:{prefix}"],
                                        at_ms // 1000 + 3600, ns.secret)
        script.append(entry)
    return script


# -- the federation handle ------------------------------------------------------------------

class Federation:
    def __init__(self, topology: FederationTopology, objects: dict[str, bytes], tmpdir: Optional[Path],
                 seed: int, queue_bound: int, shoveler_backoff: float):
        self.seed = seed
        self.objects = objects
        self.tmpdir = tmpdir
        self.clock = SimClock()
        self.state = SuiteState()
        self.faults: set[tuple[str, Optional[str]]] = set()
        self._emitters = []
        self._stopped = False
        self.origins: dict[str, Origin] = {}
        self.caches: dict[str, Cache] = {}
        log_dir = Path(tmpdir or tempfile.mkdtemp(prefix="minifed-log-"))
        self.log_path = log_dir / "records.jsonl"

        self.collector = Collector(self.log_path).start()
        self.shoveler = Shoveler(self.collector.address, queue_bound=queue_bound,
                                 backoff_base=shoveler_backoff, backoff_cap=2.0,
                                 ack_timeout=1.0).start()
        self.monitor_addr = self.shoveler.udp_address
        try:
            self.redirector = Redirector(bind=("127.0.0.1", 0)).start()
            topology = topology.with_endpoint("redirector", self.redirector.address)
            for spec in topology.origins:
                o = Origin(topology, spec.id, self.monitor_addr, bind=("127.0.0.1", 0),
                           clock=self.clock, register=False)
                topology = topology.with_endpoint(spec.id, o.address)
                self.origins[spec.id] = o
            for spec in topology.caches:
                c = Cache(topology, spec.id, self.monitor_addr, bind=("127.0.0.1", 0), clock=self.clock)
                topology = topology.with_endpoint(spec.id, c.address)
                self.caches[spec.id] = c
            self.topology = topology
            for o in self.origins.values():
                o.topology = topology
                o._register = True
                o.start()
                self._emitters.append(o.monitor)
            for c in self.caches.values():
                c.topology = topology
                c.start()
                self._emitters.append(c.monitor)
        except BaseException:
            self.teardown()
            raise

    # -- helpers ---------------------------------------------------------------------------

    @property
    def protected_probe_path(self) -> str:
        return f"{PROBE_PRIVATE_NS}/{PROBE_FILE}"

    def public_probe_path(self, origin_id: str) -> str:
        first = self.topology.origins[0].id
        prefix = PROBE_NS if origin_id == first else f"{PROBE_NS}/{origin_id}"
        return f"{prefix}/{PROBE_FILE}"

    def sha256(self, path: str) -> str:
        return hashlib.sha256(self.objects[path]).hexdigest()

    def token_for(self, prefix: str, ttl_s: int = 3600, subject: str = "harness") -> str:
        ns = self.topology.namespace(prefix)
        return mint_token(subject, [f"read:{prefix}"], int(time.time()) + ttl_s, ns.secret)

    def emitted(self) -> int:
        return sum(e.sent for e in self._emitters)

    def wait_for_quiescence(self, timeout: float = 10.0) -> bool:
        """Wait until every emitted record has been ingested and the queue drained."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            c = self.shoveler.counters()
            if c.received + c.malformed >= self.emitted() and c.queue_depth == 0:
                return True
            time.sleep(0.01)
        return False

    def records(self) -> list[MonitorRecord]:
        return [r for r in iter_log(self.log_path) if r is not None]

    def accounting(self, **kwargs):
        return aggregate(self.log_path, self.topology.namespaces, **kwargs)

    # -- workloads --------------------------------------------------------------------------

    def run_workload(self, script: Sequence[dict], pace_every: int = 50) -> Trace:
        trace = Trace()
        try:
            for i, step in enumerate(script):
                at_ms = int(step["at_ms"])
                self.clock.override = at_ms
                path = step["path"]
                loc = tuple(step.get("client_loc", (0.0, 0.0)))
                try:
                    res = fetch(path, self.topology, loc, step.get("token"),
                                client_tag=f"workload-{i}")
                    entry = TraceEntry(i, at_ms, path, 200, res.cache_status, res.served_by,
                                       len(res.body), hashlib.sha256(res.body).hexdigest(),
                                       res.rate_bytes_per_s)
                except FetchFailed as exc:
                    entry = TraceEntry(i, at_ms, path, exc.code, "", exc.cache_id, 0, "")
                except DeliveryError:
                    entry = TraceEntry(i, at_ms, path, 500, "", "", 0, "")
                trace.append(entry)
                if pace_every and (i + 1) % pace_every == 0:
                    self.wait_for_quiescence(timeout=5.0)
        finally:
            self.clock.override = None
        return trace

    # -- health -----------------------------------------------------------------------------

    def suite_config(self) -> dict:
        topo = self.topology
        first = topo.caches[0]
        at = f"{first.latitude},{first.longitude}"
        checks = [{"check": "redirector_alive", "target": "redirector",
                   "params": {"path": self.public_probe_path(topo.origins[0].id)}}]
        for c in topo.caches:
            checks += [
                {"check": "auth_access", "target": c.id,
                 "params": {"path": self.protected_probe_path,
                            "sha256": self.sha256(self.protected_probe_path)}},
                {"check": "unauth_denied", "target": c.id,
                 "params": {"path": self.protected_probe_path}},
                {"check": "transfer_rate", "target": c.id,
                 "params": {"path": f"{PROBE_NS}/{RATE_FILE}", "at": f"{c.latitude},{c.longitude}"}},
                {"check": "service_load", "target": c.id},
            ]
        for o in topo.origins:
            path = self.public_probe_path(o.id)
            checks.append({"check": "copy_public", "target": o.id,
                           "params": {"path": path, "sha256": self.sha256(path), "at": at}})
            if PROBE_PRIVATE_NS in o.namespaces:
                checks.append({"check": "copy_private", "target": o.id,
                               "params": {"path": self.protected_probe_path, "at": at,
                                          "sha256": self.sha256(self.protected_probe_path)}})
            checks.append({"check": "service_load", "target": o.id})
        admin = self.shoveler.admin_address
        checks += [
            {"check": "shoveler_throughput", "target": "shoveler", "params": {"admin": admin}},
            {"check": "shoveler_queue", "target": "shoveler", "params": {"admin": admin}},
        ]
        return {"checks": checks}

    def run_suite(self, config: Optional[dict] = None) -> HealthReport:
        return run_suite(config or self.suite_config(), self.topology, self.state)

    # -- faults -----------------------------------------------------------------------------

    def _default_target(self, kind: str, target: Optional[str]) -> Optional[str]:
        if target is not None:
            return target
        if kind == "kill_origin":
            return self.topology.origins[0].id
        if kind == "kill_cache":
            return self.topology.caches[0].id
        if kind == "corrupt_namespace_secret":
            return PROBE_PRIVATE_NS
        return None

    def inject_fault(self, kind: str, target: Optional[str] = None) -> None:
        if kind not in FAULT_KINDS:
            raise InputError(f"unknown fault kind {kind!r}; expected one of {FAULT_KINDS}")
        target = self._default_target(kind, target)
        if kind == "kill_redirector":
            self.redirector.stop()
        elif kind == "kill_origin":
            self.origins[target].stop()
        elif kind == "kill_cache":
            self.caches[target].stop()
        elif kind == "stall_collector":
            self.collector.pause()
        elif kind == "fill_shoveler_queue":
            self.shoveler.pause_drain()
            for i in range(self.shoveler.queue_bound):
                rec = MonitorRecord(stream="g", ts_ms=now_ms(), host="_filler", component="cache",
                                    event="evict", path="/_filler", bytes=0, client="",
                                    xfer_id=f"filler-{i}")
                self.shoveler.ingest(encode_monitor_record(rec))
        elif kind == "corrupt_namespace_secret":
            for svc in list(self.origins.values()) + list(self.caches.values()):
                svc.secrets[target] = b"corrupted-" + self.topology.namespace(target).secret
        self.faults.add((kind, target))

    def clear_fault(self, kind: str, target: Optional[str] = None) -> None:
        target = self._default_target(kind, target)
        if (kind, target) not in self.faults:
            raise InputError(f"fault {kind}({target}) is not active")
        self.faults.discard((kind, target))
        if kind == "kill_redirector":
            self.redirector = Redirector(bind=parse_hostport(self.topology.redirector_endpoint)).start()
            for o in self.origins.values():
                if o._thread is not None:
                    o.register_now()
        elif kind == "kill_origin":
            spec = self.topology.origin(target)
            o = Origin(self.topology, target, self.monitor_addr, bind=parse_hostport(spec.endpoint),
                       clock=self.clock).start()
            self.origins[target] = o
            self._emitters.append(o.monitor)
        elif kind == "kill_cache":
            spec = self.topology.cache(target)
            c = Cache(self.topology, target, self.monitor_addr, bind=parse_hostport(spec.endpoint),
                      clock=self.clock).start()
            self.caches[target] = c
            self._emitters.append(c.monitor)
        elif kind == "stall_collector":
            self.collector.resume()
        elif kind == "fill_shoveler_queue":
            self.shoveler.resume_drain()
        elif kind == "corrupt_namespace_secret":
            for svc in list(self.origins.values()) + list(self.caches.values()):
                svc.secrets[target] = self.topology.namespace(target).secret

    def expected_non_ok(self, kind: str, target: Optional[str] = None,
                        config: Optional[dict] = None) -> set[tuple[str, str]]:
        """The fault matrix: (check, target) pairs a fault should flip, for ``config``."""
        target = self._default_target(kind, target)
        entries = (config or self.suite_config())["checks"]
        out = set()
        for e in entries:
            check, tgt = e["check"], e["target"]
            path = e.get("params", {}).get("path", "")
            if kind == "kill_redirector":
                hit = check == "redirector_alive"
            elif kind == "kill_origin":
                hit = check == "service_load" and tgt == target
            elif kind == "kill_cache":
                only_cache = len(self.topology.caches) == 1
                hit = (tgt == target
                       or (only_cache and check in ("copy_public", "copy_private", "shoveler_throughput")))
            elif kind in ("stall_collector", "fill_shoveler_queue"):
                hit = check == "shoveler_queue"
            else:
                hit = (check in ("auth_access", "copy_private")
                       and is_under(path, target))
            if hit:
                out.add((check, tgt))
        return out

    # -- teardown -----------------------------------------------------------------------------

    def teardown(self) -> None:
        if self._stopped:
            return
        self._stopped = True
        for c in getattr(self, "caches", {}).values():
            if c._thread is not None:
                c.stop()
        for o in getattr(self, "origins", {}).values():
            if o._thread is not None:
                o.stop()
        redirector = getattr(self, "redirector", None)
        if redirector is not None and redirector._thread is not None:
            redirector.stop()
        self.shoveler.stop()
        self.collector.stop()
        # services constructed but never started still hold bound sockets
        for svc in list(self.caches.values()) + list(self.origins.values()):
            svc._server.server_close()
        if redirector is not None:
            redirector._server.server_close()
        if self.tmpdir is not None:
            shutil.rmtree(self.tmpdir, ignore_errors=True)
        else:
            shutil.rmtree(self.log_path.parent, ignore_errors=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.teardown()


def spawn_federation(topology: Union[FederationTopology, dict, None] = None, seed: int = 0,
                     n_origins: int = 1, n_caches: int = 1, queue_bound: int = DEFAULT_QUEUE_BOUND,
                     cache_capacity: int = 64 << 20, objects_per_namespace: int = 20,
                     shoveler_backoff: float = 0.05,
                     user_namespaces: Sequence[str] = USER_NAMESPACES) -> Federation:
    """Start a whole federation on loopback.

    With no ``topology`` a synthetic one is built in a temp dir and populated
    with seeded objects. A given topology is validated before anything binds
    and its endpoints are replaced with ephemeral ports.
    """
    if isinstance(topology, dict):
        topology = topology_from_dict(topology)
    if topology is not None:
        for o in topology.origins:
            if not Path(o.root_dir).is_dir():
                raise HarnessError(f"origin {o.id}: root_dir {o.root_dir} does not exist")
        topology = replace(topology, redirector_endpoint="127.0.0.1:0")
        for spec in topology.origins + topology.caches:
            topology = topology.with_endpoint(spec.id, "127.0.0.1:0")
        return Federation(topology, {}, None, seed, queue_bound, shoveler_backoff)

    tmpdir = Path(tempfile.mkdtemp(prefix="minifed-"))
    try:
        topology = build_topology(tmpdir, n_origins, n_caches, user_namespaces,
                                  cache_capacity=cache_capacity, seed=seed)
        objects = populate_origins(topology, seed, objects_per_namespace)
        return Federation(topology, objects, tmpdir, seed, queue_bound, shoveler_backoff)
    except BaseException:
        shutil.rmtree(tmpdir, ignore_errors=True)
        raise
