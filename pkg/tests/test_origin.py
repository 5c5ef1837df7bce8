import os
import random
import socket
import threading
import time

import pytest

from conftest import SECRET
from minifed.model import mint_token
from minifed.origin import Origin
from minifed.protocol import Request, decode_monitor_record

NOW_MS = 1_700_000_000_000


@pytest.fixture
def origin(small_topology):
    o = Origin(small_topology, "origin-a", register=False, clock=lambda: NOW_MS)
    yield o
    o.stop()


def auth(token):
    return (("Authorization", f"Bearer {token}"),)


def good_token(prefix="/ligo", exp=NOW_MS // 1000 + 60, secret=SECRET):
    return mint_token("t", [f"read:{prefix}"], exp, secret)


def serve(origin, req):
    res = origin.serve_request(req)
    resp, on_sent = res if isinstance(res, tuple) else (res, None)
    if on_sent:
        on_sent(len(resp.body), True)
    return resp


class TestServeRequest:
    def test_public_no_token(self, origin):
        resp = serve(origin, Request("GET", "/nova/f"))
        assert resp.code == 200 and resp.body == b"x" * 100
        assert resp.header("Content-Length") == "100"

    def test_protected_no_token(self, origin):
        assert serve(origin, Request("GET", "/ligo/a")).code == 401

    def test_protected_valid(self, origin):
        assert serve(origin, Request("GET", "/ligo/a", auth(good_token()))).body == b"hello"

    def test_wrong_scope(self, origin):
        assert serve(origin, Request("GET", "/ligo/a", auth(good_token("/nova")))).code == 403

    def test_expired(self, origin):
        tok = good_token(exp=NOW_MS // 1000)
        assert serve(origin, Request("GET", "/ligo/a", auth(tok))).code == 403

    def test_wrong_secret(self, origin):
        tok = good_token(secret=b"nope")
        assert serve(origin, Request("GET", "/ligo/a", auth(tok))).code == 403

    def test_not_bearer(self, origin):
        assert serve(origin, Request("GET", "/ligo/a", (("Authorization", "Basic x"),))).code == 403

    def test_missing_file(self, origin):
        assert serve(origin, Request("GET", "/nova/nothing")).code == 404

    def test_unowned_namespace(self, origin):
        assert serve(origin, Request("GET", "/dune/x")).code == 404

    def test_directory_is_not_an_object(self, origin):
        assert serve(origin, Request("GET", "/nova")).code == 404

    def test_locate_not_served(self, origin):
        assert serve(origin, Request("LOCATE", "/nova/f")).code == 404

    def test_zero_byte_file(self, origin, small_topology):
        open(os.path.join(small_topology.origins[0].root_dir, "nova", "empty"), "wb").close()
        resp = serve(origin, Request("GET", "/nova/empty"))
        assert resp.code == 200 and resp.body == b""


class TestPathContainment:
    @pytest.mark.parametrize("path", [
        "/nova/../../etc/passwd", "/nova/..", "/nova/%2e%2e/%2e%2e/etc/passwd",
        "/nova//etc/passwd", "/nova/./f",
    ])
    def test_traversal_denied(self, origin, path):
        resp = serve(origin, Request("GET", path))
        assert resp.code == 404

    def test_symlink_escape(self, origin, small_topology, tmp_path):
        secret_file = tmp_path / "outside"
        secret_file.write_bytes(b"secret")
        os.symlink(secret_file, os.path.join(small_topology.origins[0].root_dir, "nova", "link"))
        assert serve(origin, Request("GET", "/nova/link")).code == 404

    def test_symlink_inside_root_allowed(self, origin, small_topology):
        root = small_topology.origins[0].root_dir
        os.symlink(os.path.join(root, "nova", "f"), os.path.join(root, "nova", "alias"))
        assert serve(origin, Request("GET", "/nova/alias")).body == b"x" * 100

    def test_percent_path_is_literal(self, origin, small_topology):
        root = small_topology.origins[0].root_dir
        with open(os.path.join(root, "nova", "%2e%2e"), "wb") as fh:
            fh.write(b"literal")
        assert serve(origin, Request("GET", "/nova/%2e%2e")).body == b"literal"


class TestCounters:
    def test_counts(self, origin):
        serve(origin, Request("GET", "/nova/f"))
        serve(origin, Request("GET", "/ligo/a"))
        serve(origin, Request("GET", "/ligo/a", auth(good_token("/nova"))))
        serve(origin, Request("GET", "/nova/missing"))
        s = origin.stats()
        assert (s.requests_total, s.bytes_served, s.denied_total) == (4, 100, 2)

    def test_stats_request_not_counted(self, origin):
        resp = serve(origin, Request("STATS"))
        assert resp.json()["requests_total"] == 0
        assert origin.stats().requests_total == 0


def _udp_sink():
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.bind(("127.0.0.1", 0))
    sock.settimeout(2)
    return sock, f"127.0.0.1:{sock.getsockname()[1]}"


def test_f_records_over_network(small_topology):
    sink, addr = _udp_sink()
    with sink, Origin(small_topology, "origin-a", monitor_addr=addr, register=False) as o:
        from minifed.net import call
        resp = call(o.address, Request("GET", "/nova/f", (("X-Client", "me"),)))
        assert resp.body == b"x" * 100
        recs = [decode_monitor_record(sink.recv(9000)) for _ in range(2)]
    assert [r.event for r in recs] == ["open", "close"]
    assert recs[0].xfer_id == recs[1].xfer_id
    assert recs[1].bytes == 100 and recs[1].duration_ms is not None
    assert {r.component for r in recs} == {"origin"} and recs[0].client == "me"


def test_random_sizes_checksum(small_topology):
    from minifed.net import call
    import hashlib
    rng = random.Random(3)
    root = small_topology.origins[0].root_dir
    files = {}
    for i in range(12):
        data = rng.randbytes(rng.randint(0, 1 << 20))
        with open(os.path.join(root, "nova", f"r{i}"), "wb") as fh:
            fh.write(data)
        files[f"/nova/r{i}"] = hashlib.sha256(data).hexdigest()
    with Origin(small_topology, "origin-a", register=False) as o:
        for path, digest in files.items():
            assert hashlib.sha256(call(o.address, Request("GET", path)).body).hexdigest() == digest


def test_unreadable_root_rejected(small_topology, tmp_path):
    from dataclasses import replace
    from minifed.model import InputError
    spec = replace(small_topology.origins[0], root_dir=str(tmp_path / "missing"))
    topo = replace(small_topology, origins=(spec,))
    with pytest.raises(InputError):
        Origin(topo, "origin-a", register=False)


def test_concurrent_connections_counted(small_topology):
    from minifed.net import call
    with Origin(small_topology, "origin-a", register=False) as o:
        host, port = o.address.split(":")
        held = [socket.create_connection((host, int(port))) for _ in range(3)]
        deadline = time.time() + 2
        while o.stats().active_connections < 3 and time.time() < deadline:
            time.sleep(0.01)
        assert o.stats().active_connections == 3
        for s in held:
            s.close()
        threads = [threading.Thread(target=call, args=(o.address, Request("GET", "/nova/f")))
                   for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert o.stats().requests_total == 8
