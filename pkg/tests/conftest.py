import base64
import json
from pathlib import Path

import pytest

from minifed.harness import spawn_federation
from minifed.model import CacheSpec, FederationTopology, NamespaceSpec, OriginSpec

SECRET = b"ligo-secret"


@pytest.fixture
def small_topology(tmp_path):
    """One origin serving public /nova and protected /ligo, one cache; port 0 endpoints."""
    root = tmp_path / "origin"
    (root / "nova").mkdir(parents=True)
    (root / "ligo").mkdir(parents=True)
    (root / "nova" / "f").write_bytes(b"x" * 100)
    (root / "ligo" / "a").write_bytes(b"hello")
    return FederationTopology(
        origins=(OriginSpec("origin-a", "127.0.0.1:0", str(root), ("/ligo", "/nova")),),
        caches=(CacheSpec("cache-a", "127.0.0.1:0", 32.88, -117.23, 1000, str(tmp_path / "cache")),),
        redirector_endpoint="127.0.0.1:0",
        namespaces=(NamespaceSpec("/ligo", public=False, secret=SECRET), NamespaceSpec("/nova")),
    )


@pytest.fixture
def fed():
    f = spawn_federation(seed=7)
    yield f
    f.teardown()


def write_topology_json(path: Path, topology: FederationTopology) -> Path:
    from minifed.model import topology_to_dict
    path.write_text(json.dumps(topology_to_dict(topology)))
    return path


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode()


# -- acceptance reporting: one PASS/FAIL line per criterion ----------------------------

_criteria: dict[int, tuple[str, str, float, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title, limit_s): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call" and not report.failed:
        return
    n, title, limit = mark.args
    status = "PASS" if report.passed else "FAIL"
    prev = _criteria.get(n)
    if prev is None or status == "FAIL":
        _criteria[n] = (title, status, report.duration, limit)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, status, dur, limit = _criteria[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {title}  ({dur:.2f}s, limit {limit:.0f}s)")
