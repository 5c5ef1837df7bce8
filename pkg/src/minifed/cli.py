"""``minifed`` command line: run services, fetch objects, report, and probe."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path
from typing import Optional, Sequence

from .accounting import METRICS, aggregate, format_report, top_namespaces
from .client import DeliveryError, FetchFailed, fetch, great_circle_km, nearest_caches, parse_location
from .model import InputError, load_topology, parse_hostport

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_AUTH = 3
EXIT_NOT_FOUND = 4
EXIT_EXHAUSTED = 5
EXIT_CRIT = 2


def _serve_forever(*services) -> int:
    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    for svc in services:
        svc.start()
    try:
        while not stop.wait(0.5):
            pass
    except KeyboardInterrupt:
        pass
    finally:
        for svc in reversed(services):
            svc.stop()
    return EXIT_OK


def cmd_origin(args) -> int:
    from .origin import Origin
    topo = load_topology(args.config)
    return _serve_forever(Origin(topo, args.id, args.monitor_addr))


def cmd_cache(args) -> int:
    from .cache import Cache
    topo = load_topology(args.config)
    return _serve_forever(Cache(topo, args.id, args.monitor_addr))


def cmd_redirector(args) -> int:
    from .redirector import Redirector
    return _serve_forever(Redirector(load_topology(args.config)))


def cmd_shoveler(args) -> int:
    from .shoveler import Shoveler
    shov = Shoveler(args.collector, udp_bind=parse_hostport(args.listen_udp),
                    admin_bind=parse_hostport(args.admin), queue_bound=args.queue_bound)
    return _serve_forever(shov)


def cmd_collector(args) -> int:
    from .collector import Collector
    return _serve_forever(Collector(args.log, bind=parse_hostport(args.listen)))


def cmd_get(args) -> int:
    topo = load_topology(args.config)
    loc = parse_location(args.at) if args.at else (0.0, 0.0)
    try:
        res = fetch(args.path, topo, loc, args.token, timeout=args.timeout)
    except FetchFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_FOUND if exc.code == 404 else EXIT_AUTH
    except DeliveryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXHAUSTED
    if args.output:
        Path(args.output).write_bytes(res.body)
    else:
        sys.stdout.buffer.write(res.body)
        sys.stdout.flush()
    print(f"{len(res.body)} bytes from {res.served_by} ({res.cache_status}) "
          f"at {res.rate_bytes_per_s / 1e6:.2f} MB/s", file=sys.stderr)
    return EXIT_OK


def cmd_nearest(args) -> int:
    topo = load_topology(args.config)
    loc = parse_location(args.at)
    for cid in nearest_caches(loc, topo.caches):
        c = topo.cache(cid)
        print(f"{cid}\t{great_circle_km(loc, (c.latitude, c.longitude)):.1f} km\t{c.endpoint}")
    return EXIT_OK


def cmd_report(args) -> int:
    namespaces = load_topology(args.config).namespaces if args.config else None
    table = aggregate(args.log, namespaces, month=args.month)
    rows = top_namespaces(table, args.top, args.metric)
    sys.stdout.write(format_report(rows, args.format))
    if table.skipped:
        print(f"warning: skipped {table.skipped} corrupt log line(s)", file=sys.stderr)
    return EXIT_OK


def cmd_check_run(args) -> int:
    from .healthcheck import run_suite
    topo = load_topology(args.topology)
    with open(args.config, encoding="utf-8") as fh:
        config = json.load(fh)
    report = run_suite(config, topo)
    if args.format == "json":
        print(report.to_json())
    else:
        sys.stdout.write(report.format_text())
    return report.exit_code


def cmd_demo(args) -> int:
    from .harness import spawn_federation, zipf_script
    with spawn_federation(seed=args.seed, n_origins=2, n_caches=3) as fed:
        trace = fed.run_workload(zipf_script(fed, args.requests, seed=args.seed))
        fed.wait_for_quiescence()
        hits = sum(1 for e in trace if e.cache_status == "HIT")
        print(f"workload: {len(trace)} requests, {hits} cache hits")
        print()
        rows = top_namespaces(fed.accounting(), args.top, "transfers")
        sys.stdout.write(format_report(rows))
        print()
        report = fed.run_suite()
        sys.stdout.write(report.format_text())
    return report.exit_code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minifed", description="Desk-scale data federation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("origin", help="run an origin server")
    s.add_argument("--config", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--monitor-addr")
    s.set_defaults(func=cmd_origin)

    s = sub.add_parser("cache", help="run a cache server")
    s.add_argument("--config", required=True)
    s.add_argument("--id", required=True)
    s.add_argument("--monitor-addr")
    s.set_defaults(func=cmd_cache)

    s = sub.add_parser("redirector", help="run the redirector")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_redirector)

    s = sub.add_parser("shoveler", help="run the monitoring shoveler")
    s.add_argument("--listen-udp", required=True)
    s.add_argument("--collector", required=True)
    s.add_argument("--admin", required=True)
    s.add_argument("--queue-bound", type=int, default=10_000)
    s.set_defaults(func=cmd_shoveler)

    s = sub.add_parser("collector", help="run the monitoring collector")
    s.add_argument("--listen", required=True)
    s.add_argument("--log", required=True)
    s.set_defaults(func=cmd_collector)

    s = sub.add_parser("get", help="fetch an object through the nearest cache")
    s.add_argument("path")
    s.add_argument("--token")
    s.add_argument("--at", help="client location as lat,lon")
    s.add_argument("--config", required=True)
    s.add_argument("-o", "--output")
    s.add_argument("--timeout", type=float, default=5.0)
    s.set_defaults(func=cmd_get)

    s = sub.add_parser("nearest", help="list caches by distance")
    s.add_argument("--at", required=True)
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_nearest)

    s = sub.add_parser("report", help="accounting report from a collector log")
    s.add_argument("--log", required=True)
    s.add_argument("--config", help="topology used to resolve namespaces")
    s.add_argument("--month", help="YYYY-MM (UTC)")
    s.add_argument("--top", type=int, default=10)
    s.add_argument("--metric", choices=METRICS, default="transfers")
    s.add_argument("--format", choices=("text", "csv"), default="text")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("check", help="health checks")
    check_sub = s.add_subparsers(dest="check_command", required=True)
    r = check_sub.add_parser("run", help="run a check suite")
    r.add_argument("--config", required=True)
    r.add_argument("--topology", required=True)
    r.add_argument("--format", choices=("text", "json"), default="text")
    r.set_defaults(func=cmd_check_run)

    s = sub.add_parser("demo", help="spin up a federation, run a workload, print reports")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--requests", type=int, default=500)
    s.add_argument("--top", type=int, default=3)
    s.set_defaults(func=cmd_demo)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
