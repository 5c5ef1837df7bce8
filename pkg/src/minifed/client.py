"""Nearest-cache selection and fetch-with-failover."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .model import CacheSpec, FederationTopology, InputError, bearer
from .net import DEFAULT_TIMEOUT, call
from .protocol import ProtocolError, Request, Response

EARTH_RADIUS_KM = 6371.0


def _check_coord(lat: float, lon: float) -> None:
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        raise InputError(f"coordinates out of range: ({lat}, {lon})")


def great_circle_km(a: Sequence[float], b: Sequence[float]) -> float:
    """Haversine distance in km between two (lat, lon) points given in degrees."""
    (lat1, lon1), (lat2, lon2) = a, b
    _check_coord(lat1, lon1)
    _check_coord(lat2, lon2)
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = phi2 - phi1
    dlmb = math.radians(lon2 - lon1)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def nearest_caches(client: Sequence[float], caches: Iterable[CacheSpec]) -> list[str]:
    caches = list(caches)
    if not caches:
        raise InputError("no caches to choose from")
    keyed = [(great_circle_km(client, (c.latitude, c.longitude)), c.id) for c in caches]
    return [cid for _, cid in sorted(keyed)]


def parse_location(text: str) -> tuple[float, float]:
    try:
        lat, lon = (float(x) for x in text.split(","))
    except ValueError:
        raise InputError(f"location must be 'lat,lon', got {text!r}") from None
    _check_coord(lat, lon)
    return lat, lon


class FetchError(Exception):
    pass


class FetchFailed(FetchError):
    """A cache answered with a 4xx; other caches would answer the same."""

    def __init__(self, code: int, cache_id: str, path: str):
        super().__init__(f"{path}: cache {cache_id} answered {code}")
        self.code = code
        self.cache_id = cache_id


class DeliveryError(FetchError):
    def __init__(self, path: str, failures: list[tuple[str, str]]):
        detail = "; ".join(f"{cid}: {why}" for cid, why in failures)
        super().__init__(f"{path}: all caches failed ({detail})")
        self.failures = failures


@dataclass
class FetchResult:
    body: bytes = field(repr=False)
    served_by: str
    rate_bytes_per_s: float
    cache_status: str
    elapsed_s: float = 0.0


def get(endpoint: str, path: str, token: Optional[str] = None,
        timeout: float = DEFAULT_TIMEOUT, client_tag: Optional[str] = None) -> tuple[Response, float]:
    """One GET against ``endpoint``; returns the response and wall time in seconds."""
    headers: tuple = ()
    if token is not None:
        headers += (("Authorization", bearer(token)),)
    if client_tag:
        headers += (("X-Client", client_tag),)
    started = time.perf_counter()
    resp = call(endpoint, Request("GET", path, headers), timeout=timeout)
    return resp, time.perf_counter() - started


def fetch(path: str, topology: FederationTopology, client_loc: Sequence[float] = (0.0, 0.0),
          token: Optional[str] = None, timeout: float = DEFAULT_TIMEOUT,
          order: Optional[list[str]] = None, client_tag: Optional[str] = None) -> FetchResult:
    """Fetch ``path`` from the nearest cache, failing over on connection errors and 5xx."""
    if not topology.caches:
        raise InputError("topology has no caches")
    order = order or nearest_caches(client_loc, topology.caches)
    failures = []
    for cache_id in order:
        endpoint = topology.cache(cache_id).endpoint
        try:
            resp, elapsed = get(endpoint, path, token, timeout, client_tag)
        except (OSError, ProtocolError) as exc:
            failures.append((cache_id, f"unreachable: {exc}"))
            continue
        if resp.code == 200:
            rate = len(resp.body) / max(elapsed, 1e-9)
            return FetchResult(resp.body, cache_id, rate, resp.header("X-Cache") or "", elapsed)
        if 400 <= resp.code < 500:
            raise FetchFailed(resp.code, cache_id, path)
        failures.append((cache_id, f"status {resp.code}"))
    raise DeliveryError(path, failures)
