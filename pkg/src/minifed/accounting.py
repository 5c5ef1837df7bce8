"""Per-namespace, per-month usage accounting over the collector's record log."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from .collector import iter_log
from .model import InputError, MonitorRecord, NamespaceSpec, resolve_namespace

UNKNOWN_NAMESPACE = "/_unknown"
OTHER = "Other"
METRICS = ("transfers", "bytes")


def month_of(ts_ms: int) -> str:
    return datetime.fromtimestamp(ts_ms / 1000, tz=timezone.utc).strftime("%Y-%m")


@dataclass
class UsageRow:
    transfers: int = 0
    bytes: int = 0

    def add(self, transfers: int, nbytes: int):
        self.transfers += transfers
        self.bytes += nbytes


@dataclass
class AccountingTable:
    rows: dict[tuple[str, str], UsageRow] = field(default_factory=dict)
    skipped: int = 0

    def totals(self) -> UsageRow:
        total = UsageRow()
        for row in self.rows.values():
            total.add(row.transfers, row.bytes)
        return total

    def by_namespace(self) -> dict[str, UsageRow]:
        out: dict[str, UsageRow] = {}
        for (ns, _month), row in self.rows.items():
            out.setdefault(ns, UsageRow()).add(row.transfers, row.bytes)
        return out

    def as_dict(self) -> dict[tuple[str, str], tuple[int, int]]:
        return {k: (r.transfers, r.bytes) for k, r in self.rows.items()}


def namespace_for(path: str, namespaces: Optional[Sequence[NamespaceSpec]]) -> str:
    """Resolve against the namespace table, or use the first path component."""
    if namespaces is None:
        head = path.lstrip("/").split("/", 1)[0]
        return "/" + head if head else UNKNOWN_NAMESPACE
    try:
        ns = resolve_namespace(path, namespaces)
    except InputError:
        return UNKNOWN_NAMESPACE
    return ns.prefix if ns else UNKNOWN_NAMESPACE


def aggregate(records: Union[str, Path, Iterable[Optional[MonitorRecord]]],
              namespaces: Optional[Sequence[NamespaceSpec]] = None,
              month: Optional[str] = None, since_ms: Optional[int] = None,
              until_ms: Optional[int] = None, component: Optional[str] = "cache") -> AccountingTable:
    """Count and sum f-stream close records by (namespace, UTC month).

    ``records`` is a log path or an iterable of records (None marks a corrupt
    line). ``component`` restricts to deliveries by caches by default, so a
    cache miss is not counted twice through the origin's own close record.
    """
    if isinstance(records, (str, Path)):
        records = iter_log(records)
    table = AccountingTable()
    for rec in records:
        if rec is None:
            table.skipped += 1
            continue
        if rec.stream != "f" or rec.event != "close":
            continue
        if component is not None and rec.component != component:
            continue
        if since_ms is not None and rec.ts_ms < since_ms:
            continue
        if until_ms is not None and rec.ts_ms >= until_ms:
            continue
        rec_month = month_of(rec.ts_ms)
        if month is not None and rec_month != month:
            continue
        key = (namespace_for(rec.path, namespaces), rec_month)
        table.rows.setdefault(key, UsageRow()).add(1, rec.bytes)
    return table


@dataclass(frozen=True)
class RankedRow:
    namespace: str
    transfers: int
    bytes: int


def top_namespaces(table: AccountingTable, n: int, metric: str = "transfers") -> list[RankedRow]:
    """Rank namespaces by ``metric`` (all months summed); the rest folds into "Other"."""
    if n < 1:
        raise InputError("n must be at least 1")
    if metric not in METRICS:
        raise InputError(f"metric must be one of {METRICS}")
    per_ns = table.by_namespace()
    ranked = sorted(per_ns.items(), key=lambda kv: (-getattr(kv[1], metric), kv[0]))
    rows = [RankedRow(ns, r.transfers, r.bytes) for ns, r in ranked[:n]]
    rest = ranked[n:]
    if rest:
        rows.append(RankedRow(OTHER, sum(r.transfers for _, r in rest), sum(r.bytes for _, r in rest)))
    return rows


def format_report(rows: Sequence[RankedRow], fmt: str = "text") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["namespace", "transfers", "bytes"])
        for r in rows:
            writer.writerow([r.namespace, r.transfers, r.bytes])
        return buf.getvalue()
    if fmt != "text":
        raise InputError(f"unknown format {fmt!r}")
    header = ("Namespace", "Transfers", "Bytes")
    cells = [header] + [(r.namespace, str(r.transfers), str(r.bytes)) for r in rows]
    w0 = max(len(c[0]) for c in cells)
    w1 = max(len(c[1]) for c in cells)
    w2 = max(len(c[2]) for c in cells)
    lines = [f"{a:<{w0}}  {b:>{w1}}  {c:>{w2}}" for a, b, c in cells]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"
