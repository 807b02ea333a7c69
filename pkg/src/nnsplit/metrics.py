"""Evaluation metrics derived from a simulation trace.

Times are accumulated in integer nanoseconds and converted once, so
``overlap_s`` is exact and zero for a fully serial run.

* ``service_time_s``: first client transmission to the server's final ComputeEnd.
* ``residual_time_s``: first packet of the server's sequential input to its
  final ComputeEnd.  Includes the server's cache wait.
* ``total_transmit_s``: for every stream, first arrival at its destination
  minus the moment it started sending.
* ``overlap_s``: compute + cache + transmit minus service time.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import asdict, dataclass, fields
from typing import Any, Sequence

from .netsim import NS, EventKind, SimTrace
from .planner import SERVER


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    service_time_s: float
    residual_time_s: float
    total_cache_s: float
    per_node_cache_s: dict[str, float]
    total_compute_s: float
    total_transmit_s: float
    overlap_s: float
    overlap_fraction: float
    per_link_bytes: tuple[int, ...]
    server_packets_cached: int
    server_cache_s: float
    server_compute_s: float


SCALAR_FIELDS = (
    "service_time_s",
    "residual_time_s",
    "total_cache_s",
    "total_compute_s",
    "total_transmit_s",
    "overlap_s",
    "overlap_fraction",
    "server_packets_cached",
    "server_cache_s",
    "server_compute_s",
)

#: Column order of :func:`to_csv`.
CSV_COLUMNS = ("name", *SCALAR_FIELDS, "per_link_bytes", "per_node_cache_s")


def derive(trace: SimTrace) -> MetricsReport:
    server = trace.nodes.get(SERVER)
    final_block = f"block{trace.plan.blocks[-1].id}"
    done = [
        ev.time_ns
        for ev in trace.events
        if ev.kind is EventKind.COMPUTE_END and ev.node == SERVER and ev.id == final_block
    ]
    if server is None or not done or server.first_arrival_ns is None:
        raise MetricsError("trace has no final ComputeEnd on the server")
    end = done[-1]
    starts = [ev.time_ns for ev in trace.events if ev.kind is EventKind.TRANSMIT_START and ev.node == "CLIENT"]
    start = min(starts) if starts else 0

    service = end - start
    residual = end - server.first_arrival_ns
    cache = sum(n.cache_wait_ns for n in trace.nodes.values())
    compute = sum(n.compute_ns for n in trace.nodes.values())
    transmit = sum(s.first_arrival_ns - s.start_ns for s in trace.streams if s.packets)
    busy = cache + compute + transmit
    overlap = busy - service
    return MetricsReport(
        service_time_s=service / NS,
        residual_time_s=residual / NS,
        total_cache_s=cache / NS,
        per_node_cache_s={name: n.cache_wait_s for name, n in trace.nodes.items() if n.blocks},
        total_compute_s=compute / NS,
        total_transmit_s=transmit / NS,
        overlap_s=overlap / NS,
        overlap_fraction=overlap / busy if busy else 0.0,
        per_link_bytes=tuple(trace.per_link_bytes),
        server_packets_cached=server.packets_cached,
        server_cache_s=server.cache_wait_s,
        server_compute_s=server.compute_s,
    )


@dataclass(frozen=True)
class Comparison:
    """``ratio`` is b / a; ``delta_pct`` is 100 (b - a) / a.

    0/0 gives ratio 1.  x/0 gives ``inf`` and the field is listed in ``flagged``.
    """

    ratio: dict[str, float]
    delta_pct: dict[str, float]
    flagged: tuple[str, ...]

    def reduction_pct(self, name: str) -> float:
        """Percentage by which ``a`` is below ``b`` for ``name``."""
        r = self.ratio[name]
        return 100.0 * (1.0 - 1.0 / r) if r else -math.inf


def _ratio(a: float, b: float) -> tuple[float, float, bool]:
    if a == 0:
        if b == 0:
            return 1.0, 0.0, False
        return math.inf, math.inf, True
    return b / a, 100.0 * (b - a) / a, False


def compare(a: MetricsReport, b: MetricsReport) -> Comparison:
    if len(a.per_link_bytes) != len(b.per_link_bytes):
        raise MetricsError("reports come from different topologies")
    ratio, delta, flagged = {}, {}, []
    pairs = [(name, getattr(a, name), getattr(b, name)) for name in SCALAR_FIELDS]
    pairs += [(f"link{i}_bytes", x, y) for i, (x, y) in enumerate(zip(a.per_link_bytes, b.per_link_bytes))]
    for name, x, y in pairs:
        r, d, bad = _ratio(x, y)
        ratio[name], delta[name] = r, d
        if bad:
            flagged.append(name)
    return Comparison(ratio, delta, tuple(flagged))


def summarize(reports: Sequence[MetricsReport]) -> dict[str, dict[str, float]]:
    """Median, min and max of each scalar field over repeated runs."""
    if not reports:
        raise MetricsError("nothing to summarize")
    out = {}
    for name in SCALAR_FIELDS:
        vals = [getattr(r, name) for r in reports]
        out[name] = {"median": statistics.median(vals), "min": min(vals), "max": max(vals)}
    return out


def _fmt(value: Any) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def csv_row(name: str, report: MetricsReport) -> list[str]:
    row = [name, *(_fmt(getattr(report, f)) for f in SCALAR_FIELDS)]
    row.append(";".join(str(b) for b in report.per_link_bytes))
    row.append(";".join(f"{k}={_fmt(v)}" for k, v in report.per_node_cache_s.items()))
    return row


def comparison_row(name: str, cmp: Comparison) -> list[str]:
    """A row in :data:`CSV_COLUMNS` layout holding ratios instead of values."""
    row = [name, *(_fmt(cmp.ratio[f]) for f in SCALAR_FIELDS)]
    links = sorted((k for k in cmp.ratio if k.startswith("link")), key=lambda k: int(k[4:-6]))
    row.append(";".join(_fmt(cmp.ratio[k]) for k in links))
    row.append("")
    return row


def to_csv(rows: Sequence[tuple[str, MetricsReport | Comparison]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for name, item in rows:
        writer.writerow(comparison_row(name, item) if isinstance(item, Comparison) else csv_row(name, item))
    return buf.getvalue()


def report_to_dict(report: MetricsReport) -> dict[str, Any]:
    data = asdict(report)
    data["per_link_bytes"] = list(report.per_link_bytes)
    return data


def report_from_dict(data: dict[str, Any]) -> MetricsReport:
    names = {f.name for f in fields(MetricsReport)}
    if set(data) != names:
        raise MetricsError(f"report fields mismatch: {sorted(set(data) ^ names)}")
    data = dict(data)
    data["per_link_bytes"] = tuple(data["per_link_bytes"])
    return MetricsReport(**data)


def to_json(report: MetricsReport) -> str:
    return json.dumps(report_to_dict(report), indent=2, sort_keys=True)
