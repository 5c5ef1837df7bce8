"""End-to-end probe suite with Checkmk-style OK/WARN/CRIT results."""

from __future__ import annotations

import hashlib
import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from . import net
from .client import DeliveryError, FetchFailed, fetch, get, great_circle_km, parse_location
from .model import FederationTopology, mint_token, now_ms, resolve_namespace
from .protocol import ProtocolError, Request

OK, WARN, CRIT = "OK", "WARN", "CRIT"
STATUSES = (OK, WARN, CRIT)

CHECK_IDS = (
    "auth_access",
    "unauth_denied",
    "shoveler_throughput",
    "shoveler_queue",
    "copy_public",
    "copy_private",
    "transfer_rate",
    "service_load",
    "redirector_alive",
)
# run after the data-path checks so they observe the records those produced
_MONITORING_CHECKS = ("shoveler_throughput", "shoveler_queue")

MB = 1_000_000
DEFAULT_RATE_BUCKETS = ((500.0, 5 * MB), (3000.0, 2 * MB), (float("inf"), 1 * MB))
DEFAULT_TIMEOUT = 5.0
DEFAULT_LOAD_CEILING = 64


@dataclass
class CheckResult:
    check_id: str
    target: str
    status: str
    metrics: dict = field(default_factory=dict)
    detail: str = ""
    duration_ms: int = 0

    def to_dict(self) -> dict:
        return {"check_id": self.check_id, "target": self.target, "status": self.status,
                "metrics": self.metrics, "detail": self.detail, "duration_ms": self.duration_ms}


@dataclass
class HealthReport:
    started_at: int
    results: list[CheckResult] = field(default_factory=list)

    @property
    def summary(self) -> dict[str, int]:
        counts = {s: 0 for s in STATUSES}
        for r in self.results:
            counts[r.status] += 1
        return counts

    @property
    def exit_code(self) -> int:
        return 2 if self.summary[CRIT] else 0

    def non_ok(self) -> set[tuple[str, str]]:
        return {(r.check_id, r.target) for r in self.results if r.status != OK}

    def to_dict(self) -> dict:
        return {"started_at": self.started_at, "results": [r.to_dict() for r in self.results],
                "summary": self.summary}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def format_text(self) -> str:
        lines = []
        for r in self.results:
            metrics = " ".join(f"{k}={_fmt(v)}" for k, v in sorted(r.metrics.items()))
            lines.append(f"{r.status:<4} {r.check_id:<20} {r.target:<14} {r.duration_ms:>5}ms"
                         f"  {metrics}  {r.detail}".rstrip())
        s = self.summary
        lines.append(f"summary: OK={s[OK]} WARN={s[WARN]} CRIT={s[CRIT]}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return f"{v:.1f}" if isinstance(v, float) else str(v)


def rate_threshold(distance_km: float, buckets=DEFAULT_RATE_BUCKETS) -> float:
    for limit_km, min_rate in buckets:
        if distance_km < limit_km:
            return float(min_rate)
    return float(buckets[-1][1])


def rate_status(rate: float, distance_km: float, buckets=DEFAULT_RATE_BUCKETS) -> str:
    threshold = rate_threshold(distance_km, buckets)
    if rate >= threshold:
        return OK
    if rate >= threshold / 2:
        return WARN
    return CRIT


def queue_status(depth: int, bound: int, warn_fraction: float = 0.5, crit_fraction: float = 0.9) -> str:
    if depth >= crit_fraction * bound:
        return CRIT
    if depth >= warn_fraction * bound:
        return WARN
    return OK


class SuiteState:
    """Memory carried between suite runs (last seen shoveler counters)."""

    def __init__(self):
        self.last_received: dict[str, int] = {}
        self._lock = threading.Lock()


class _CheckFailed(Exception):
    def __init__(self, status: str, detail: str, **metrics):
        super().__init__(detail)
        self.status = status
        self.detail = detail
        self.metrics = metrics


def _endpoint(target: str, topology: FederationTopology, params: dict) -> str:
    if "endpoint" in params:
        return params["endpoint"]
    if target == "redirector":
        return topology.redirector_endpoint
    for spec in topology.caches + topology.origins:
        if spec.id == target:
            return spec.endpoint
    raise _CheckFailed(CRIT, f"target {target!r} not found in topology")


def _probe_token(path: str, topology: FederationTopology, scope: Optional[str] = None,
                 ttl_s: int = 600) -> str:
    ns = resolve_namespace(path, topology.namespaces)
    if ns is None or ns.public:
        raise _CheckFailed(CRIT, f"{path} is not in a protected namespace")
    scope = scope or f"read:{ns.prefix}"
    return mint_token("healthcheck", [scope], int(time.time()) + ttl_s, ns.secret)


def _digest_check(body: bytes, params: dict) -> dict:
    digest = hashlib.sha256(body).hexdigest()
    expected = params.get("sha256")
    if expected and digest != expected:
        raise _CheckFailed(CRIT, f"digest mismatch: got {digest[:12]}, want {expected[:12]}",
                           bytes=len(body))
    return {"bytes": len(body)}


def _get_direct(endpoint: str, path: str, token: Optional[str], timeout: float):
    try:
        return get(endpoint, path, token, timeout, client_tag="healthcheck")
    except (OSError, ProtocolError) as exc:
        raise _CheckFailed(CRIT, f"unreachable {endpoint}: {exc}") from None


def _check_auth_access(target, params, topology, state):
    path = params["path"]
    endpoint = _endpoint(target, topology, params)
    resp, elapsed = _get_direct(endpoint, path, _probe_token(path, topology), params["timeout"])
    if resp.code != 200:
        raise _CheckFailed(CRIT, f"authorized GET {path} returned {resp.code}", code=resp.code)
    metrics = _digest_check(resp.body, params)
    metrics["code"] = 200
    return OK, metrics, f"authorized GET {path} ok"


def _check_unauth_denied(target, params, topology, state):
    path = params["path"]
    endpoint = _endpoint(target, topology, params)
    anon, _ = _get_direct(endpoint, path, None, params["timeout"])
    wrong_scope = params.get("wrong_scope", "read:/_probe_wrong_scope")
    bad, _ = _get_direct(endpoint, path, _probe_token(path, topology, wrong_scope), params["timeout"])
    metrics = {"anonymous_code": anon.code, "wrong_scope_code": bad.code}
    if anon.code == 200 or bad.code == 200:
        raise _CheckFailed(CRIT, f"protected {path} readable without valid credentials", **metrics)
    if (anon.code, bad.code) != (401, 403):
        return WARN, metrics, f"expected 401/403, got {anon.code}/{bad.code}"
    return OK, metrics, "protected probe denied without credentials"


def _shoveler_stats(params) -> dict:
    admin = params.get("admin") or params.get("endpoint")
    if not admin:
        raise _CheckFailed(CRIT, "no shoveler admin address configured")
    try:
        return net.stats(admin, timeout=params["timeout"])
    except (OSError, ProtocolError, ValueError) as exc:
        raise _CheckFailed(CRIT, f"shoveler admin unreachable: {exc}") from None


def _check_shoveler_throughput(target, params, topology, state):
    with state._lock:
        previous = state.last_received.get(target, params.get("previous_received", 0))
    deadline = time.monotonic() + params.get("settle_s", 1.0)
    while True:
        received = _shoveler_stats(params)["received"]
        if received > previous or time.monotonic() >= deadline:
            break
        time.sleep(0.05)
    with state._lock:
        state.last_received[target] = received
    metrics = {"received": received, "delta": received - previous}
    if received <= previous:
        return WARN, metrics, "no new messages since last run"
    return OK, metrics, ""


def _check_shoveler_queue(target, params, topology, state):
    # a backlog must persist for settle_s to count; bursts drain within it
    deadline = time.monotonic() + params.get("settle_s", 0.5)
    while True:
        stats = _shoveler_stats(params)
        bound = params.get("queue_bound") or stats.get("queue_bound") or 10_000
        depth = stats["queue_depth"]
        status = queue_status(depth, bound, params.get("warn_fraction", 0.5),
                              params.get("crit_fraction", 0.9))
        if status == OK or time.monotonic() >= deadline:
            break
        time.sleep(0.05)
    return status, {"queue_depth": depth, "queue_bound": bound, "dropped": stats["dropped"]}, ""


def _fetch_via_caches(path, topology, params, token):
    loc = params.get("at")
    client_loc = parse_location(loc) if isinstance(loc, str) else tuple(loc or (0.0, 0.0))
    order = [params["cache"]] if params.get("cache") else None
    try:
        return fetch(path, topology, client_loc, token, timeout=params["timeout"], order=order,
                     client_tag="healthcheck")
    except FetchFailed as exc:
        raise _CheckFailed(CRIT, str(exc), code=exc.code) from None
    except DeliveryError as exc:
        raise _CheckFailed(CRIT, str(exc)) from None


def _check_copy(private: bool):
    def run(target, params, topology, state):
        path = params["path"]
        owner = None
        ns = resolve_namespace(path, topology.namespaces)
        if ns is not None:
            owner = next((o.id for o in topology.origins if ns.prefix in o.namespaces), None)
        if owner != target:
            raise _CheckFailed(CRIT, f"{path} is not served by origin {target!r}")
        token = _probe_token(path, topology) if private else None
        result = _fetch_via_caches(path, topology, params, token)
        metrics = _digest_check(result.body, params)
        metrics["served_by"] = result.served_by
        return OK, metrics, f"copied via {result.served_by} ({result.cache_status})"
    return run


def _check_transfer_rate(target, params, topology, state):
    path = params["path"]
    spec = next((c for c in topology.caches if c.id == target), None)
    if spec is None:
        raise _CheckFailed(CRIT, f"target {target!r} is not a cache")
    loc = params.get("at", (spec.latitude, spec.longitude))
    client_loc = parse_location(loc) if isinstance(loc, str) else tuple(loc)
    token = None
    ns = resolve_namespace(path, topology.namespaces)
    if ns is not None and not ns.public:
        token = _probe_token(path, topology)
    resp, elapsed = _get_direct(spec.endpoint, path, token, params["timeout"])
    if resp.code != 200:
        raise _CheckFailed(CRIT, f"GET {path} returned {resp.code}", code=resp.code)
    distance = great_circle_km(client_loc, (spec.latitude, spec.longitude))
    rate = len(resp.body) / max(elapsed, 1e-9)
    buckets = params.get("buckets", DEFAULT_RATE_BUCKETS)
    metrics = {"rate_bytes_per_s": rate, "distance_km": distance,
               "threshold": rate_threshold(distance, buckets), "bytes": len(resp.body)}
    return rate_status(rate, distance, buckets), metrics, ""


def _check_service_load(target, params, topology, state):
    endpoint = _endpoint(target, topology, params)
    try:
        stats = net.stats(endpoint, timeout=params["timeout"])
    except (OSError, ProtocolError, ValueError) as exc:
        raise _CheckFailed(CRIT, f"STATS unreachable at {endpoint}: {exc}") from None
    ceiling = params.get("max_active_connections", DEFAULT_LOAD_CEILING)
    active = stats.get("active_connections", 0)
    metrics = {"active_connections": active, "requests_total": stats.get("requests_total", 0)}
    if active >= ceiling:
        return WARN, metrics, f"{active} active connections (ceiling {ceiling})"
    return OK, metrics, ""


def _check_redirector_alive(target, params, topology, state):
    endpoint = _endpoint(target, topology, params)
    path = params["path"]
    try:
        resp = net.call(endpoint, Request("LOCATE", path), timeout=params["timeout"])
    except (OSError, ProtocolError) as exc:
        raise _CheckFailed(CRIT, f"redirector unreachable: {exc}") from None
    if resp.code != 302:
        raise _CheckFailed(CRIT, f"LOCATE {path} returned {resp.code}", code=resp.code)
    return OK, {"code": 302}, f"{path} -> {resp.header('Location')}"


_CHECKS = {
    "auth_access": _check_auth_access,
    "unauth_denied": _check_unauth_denied,
    "shoveler_throughput": _check_shoveler_throughput,
    "shoveler_queue": _check_shoveler_queue,
    "copy_public": _check_copy(private=False),
    "copy_private": _check_copy(private=True),
    "transfer_rate": _check_transfer_rate,
    "service_load": _check_service_load,
    "redirector_alive": _check_redirector_alive,
}


def run_check(check_id: str, target: str, params: Optional[dict], topology: FederationTopology,
              state: Optional[SuiteState] = None) -> CheckResult:
    """Run one probe. Never raises for service failures; they become CRIT results."""
    if check_id not in _CHECKS:
        raise ValueError(f"unknown check {check_id!r}")
    params = {"timeout": DEFAULT_TIMEOUT, **(params or {})}
    state = state or SuiteState()
    started = time.monotonic()
    try:
        status, metrics, detail = _CHECKS[check_id](target, params, topology, state)
    except _CheckFailed as exc:
        status, metrics, detail = exc.status, exc.metrics, exc.detail
    except KeyError as exc:
        status, metrics, detail = CRIT, {}, f"missing parameter {exc}"
    duration = int((time.monotonic() - started) * 1000)
    return CheckResult(check_id, target, status, metrics, detail, duration)


def run_suite(config: dict, topology: FederationTopology, state: Optional[SuiteState] = None,
              max_workers: int = 8) -> HealthReport:
    """Run every configured check; results come back in config order.

    ``config`` is ``{"defaults": {check_id: params}, "checks": [{"check", "target",
    "params"}]}``. Data-path checks run concurrently, then rate probes one at a
    time, then the shoveler checks.
    """
    state = state or SuiteState()
    defaults = config.get("defaults", {})
    entries = config.get("checks", [])
    for e in entries:
        if e["check"] not in CHECK_IDS:
            raise ValueError(f"unknown check {e['check']!r}")
    report = HealthReport(started_at=now_ms())
    results: list[Optional[CheckResult]] = [None] * len(entries)

    def job(i):
        e = entries[i]
        params = {**defaults.get(e["check"], {}), **e.get("params", {})}
        results[i] = run_check(e["check"], e["target"], params, topology, state)

    def phase_of(check_id):
        if check_id == "transfer_rate":
            return 1
        return 2 if check_id in _MONITORING_CHECKS else 0

    for phase in range(3):
        idx = [i for i, e in enumerate(entries) if phase_of(e["check"]) == phase]
        if not idx:
            continue
        # rate probes run one at a time so they do not share bandwidth
        workers = 1 if phase == 1 else max(1, min(max_workers, len(idx)))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(job, idx))
    report.results = [r for r in results if r is not None]
    return report

