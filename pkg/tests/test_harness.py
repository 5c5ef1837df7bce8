import os
import socket
import tempfile
import threading
from collections import defaultdict
from dataclasses import replace

import pytest

from minifed.healthcheck import run_check
from minifed.harness import (
    FAULT_KINDS,
    PROBE_PRIVATE_NS,
    HarnessError,
    build_topology,
    spawn_federation,
    zipf_script,
)
from minifed.model import InputError, TopologyError, topology_to_dict


def test_spawn_minimal_all_ok(fed):
    assert len(fed.caches) == 1 and len(fed.origins) == 1
    assert fed.run_suite().non_ok() == set()


def test_endpoints_rewritten(fed):
    assert not fed.topology.redirector_endpoint.endswith(":0")
    assert all(not s.endpoint.endswith(":0") for s in fed.topology.caches + fed.topology.origins)


def test_same_seed_same_trace():
    traces = []
    for _ in range(2):
        with spawn_federation(seed=42, n_origins=2, n_caches=2) as f:
            traces.append(f.run_workload(zipf_script(f, 200, seed=42)).dumps())
    assert traces[0] == traces[1] and len(traces[0]) > 0


def test_different_seed_different_trace():
    out = []
    for seed in (1, 2):
        with spawn_federation(seed=seed) as f:
            out.append(f.run_workload(zipf_script(f, 50, seed=seed)).dumps())
    assert out[0] != out[1]


def test_invalid_topology_before_binding(small_topology, tmp_path):
    bad = topology_to_dict(small_topology)
    bad["namespaces"].append({"prefix": "/orphan", "public": True})
    threads = threading.active_count()
    with pytest.raises(TopologyError):
        spawn_federation(bad)
    missing = replace(small_topology, origins=(replace(small_topology.origins[0],
                                                       root_dir=str(tmp_path / "nope")),))
    with pytest.raises(HarnessError):
        spawn_federation(missing)
    assert threading.active_count() == threads


def test_two_gets_miss_then_hit(fed):
    path = sorted(p for p in fed.objects if p.startswith("/nova"))[0]
    trace = fed.run_workload([{"at_ms": 1, "path": path}, {"at_ms": 2, "path": path}])
    assert [e.cache_status for e in trace] == ["MISS", "HIT"]
    assert trace[0].sha256 == trace[1].sha256 == fed.sha256(path)


def test_empty_script(fed):
    trace = fed.run_workload([])
    assert list(trace) == [] and trace.dumps() == b""


def test_failures_land_in_trace(fed):
    trace = fed.run_workload([{"at_ms": 1, "path": "/ligo/obj-0000.dat"},
                              {"at_ms": 2, "path": "/nova/none"}])
    assert [e.code for e in trace] == [401, 404]


def test_zipf_recount_three_namespaces():
    with spawn_federation(seed=5, n_origins=2, n_caches=2,
                          user_namespaces=("/ligo", "/nova", "/dune")) as f:
        trace = f.run_workload(zipf_script(f, 1000, seed=5))
        assert f.wait_for_quiescence()
        table = f.accounting()
        assert all(e.code == 200 for e in trace)
        assert (table.totals().transfers, table.totals().bytes) == trace.totals()
        per_ns = defaultdict(lambda: [0, 0])
        for e in trace:
            ns = "/" + e.path.split("/")[1]
            per_ns[ns][0] += 1
            per_ns[ns][1] += e.bytes
        got = {ns: [r.transfers, r.bytes] for ns, r in table.by_namespace().items()}
        assert got == dict(per_ns)
        # the workload spans several simulated months
        assert len({m for _, m in table.rows}) >= 5


def test_unknown_fault_kind(fed):
    with pytest.raises(InputError):
        fed.inject_fault("unplug_everything")
    with pytest.raises(InputError):
        fed.clear_fault("kill_cache")


@pytest.mark.parametrize("kind", FAULT_KINDS)
def test_each_fault_flips_mapped_checks_then_clears(kind):
    with spawn_federation(seed=1, n_origins=2, n_caches=2, queue_bound=32) as f:
        assert f.run_suite().non_ok() == set()
        f.inject_fault(kind)
        rep = f.run_suite()
        assert rep.non_ok() == f.expected_non_ok(kind), rep.format_text()
        assert f.expected_non_ok(kind)
        f.clear_fault(kind)
        f.wait_for_quiescence()
        assert f.run_suite().non_ok() == set()


def test_stall_collector_crosses_warn_then_crit():
    with spawn_federation(seed=2, queue_bound=20) as f:
        f.inject_fault("stall_collector")
        statuses = []
        objs = sorted(p for p in f.objects if p.startswith("/nova"))
        for p in objs[:12]:
            f.run_workload([{"at_ms": 1, "path": p}], pace_every=0)
            r = run_check("shoveler_queue", "shoveler",
                          {"admin": f.shoveler.admin_address, "settle_s": 0}, f.topology)
            statuses.append(r.status)
        assert "WARN" in statuses and statuses[-1] == "CRIT"
        assert statuses.index("WARN") < statuses.index("CRIT")


def test_corrupt_secret_keeps_unauth_ok():
    with spawn_federation(seed=3) as f:
        f.inject_fault("corrupt_namespace_secret", PROBE_PRIVATE_NS)
        rep = f.run_suite()
        by_check = {r.check_id: r.status for r in rep.results}
        assert by_check["auth_access"] == "CRIT" and by_check["unauth_denied"] == "OK"


def test_build_topology_limits(tmp_path):
    with pytest.raises(InputError):
        build_topology(tmp_path, n_caches=9)
    topo = build_topology(tmp_path, n_origins=3, n_caches=8)
    assert len(topo.caches) == 8
    assert topo.owner_of("/_probe/origin-2").id == "origin-2"


def _open_fds():
    return len(os.listdir("/proc/self/fd"))


def _minifed_tmpdirs():
    return {p for p in os.listdir(tempfile.gettempdir()) if p.startswith("minifed-")}


@pytest.mark.slow
def test_no_leaks_over_100_cycles():
    for _ in range(3):  # warm-up: lazily created module state
        spawn_federation(seed=0, objects_per_namespace=1).teardown()
    fds, threads, dirs = _open_fds(), threading.active_count(), _minifed_tmpdirs()
    ports = []
    for i in range(100):
        f = spawn_federation(seed=i, objects_per_namespace=1)
        ports.append(f.topology.caches[0].endpoint)
        f.teardown()
    assert _open_fds() == fds
    assert threading.active_count() == threads
    assert _minifed_tmpdirs() == dirs
    host, port = ports[-1].split(":")
    with socket.socket() as s:
        s.bind((host, int(port)))  # port released
