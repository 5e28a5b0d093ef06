"""Classic-traceroute oracle and run metrics.

A link is two responding hops at adjacent TTLs of the same trace; a
non-responding hop breaks the chain. Destinations can be link endpoints
but are not counted as discovered nodes.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .address import Address, format_address, is_invalid, parse_address
from .engine import GAP_LIMIT, Hop, StopReason, TraceRecord
from .topology import ReplyKind, SimTopology

REASON_ORDER = (StopReason.LOOP, StopReason.GAP, StopReason.STOP_SET, StopReason.NORMAL)
REASON_LABELS = {
    StopReason.LOOP: "loop",
    StopReason.GAP: "gap",
    StopReason.STOP_SET: "stop set",
    StopReason.NORMAL: "normal",
}


def trace_links(hops: Sequence[Hop]) -> set[tuple[Address, Address]]:
    by_ttl = {hop.ttl: hop.responders for hop in hops}
    links = set()
    for ttl, here in by_ttl.items():
        for a in here:
            for b in by_ttl.get(ttl + 1, ()):
                if a != b:
                    links.add((a, b))
    return links


def trace_nodes(hops: Sequence[Hop], destinations: set[Address]) -> set[Address]:
    return {a for hop in hops for a in hop.responders if a not in destinations}


@dataclass
class OracleResult:
    nodes: set[Address]
    links: set[tuple[Address, Address]]
    probe_count: int
    per_interface_visits: Counter
    per_destination_probes: Counter
    destination_hits: Counter = field(default_factory=Counter)
    records: list[TraceRecord] = field(default_factory=list)


def classic_oracle(
    topo: SimTopology,
    monitors: Sequence[Address],
    dests: Sequence[Address],
    gap_limit: int = GAP_LIMIT,
) -> OracleResult:
    """Plain traceroute from every monitor to every destination, TTL 1 upwards."""
    dest_set = set(dests)
    nodes: set[Address] = set()
    links: set[tuple[Address, Address]] = set()
    visits: Counter = Counter()
    per_dest: Counter = Counter()
    hits: Counter = Counter()
    records = []
    total = 0
    for monitor in monitors:
        for dest in dests:
            length = len(topo.route(monitor, dest))
            hops: list[Hop] = []
            ttl, gap = 0, 0
            reason = StopReason.NORMAL
            while True:
                ttl += 1
                reply = topo.probe(monitor, dest, ttl)
                total += 1
                per_dest[dest] += 1
                if ttl >= length:
                    hits[dest] += 1
                if reply.is_timeout:
                    hops.append(Hop(ttl, [None]))
                    gap += 1
                    if gap >= gap_limit:
                        reason = StopReason.GAP
                        break
                    continue
                gap = 0
                visits[reply.responder] += 1
                hops.append(Hop(ttl, [reply.responder], [reply.rtt or 0.0]))
                if reply.kind is ReplyKind.DESTINATION_UNREACHABLE:
                    break
            nodes |= trace_nodes(hops, dest_set)
            links |= trace_links(hops)
            records.append(
                TraceRecord(monitor, dest, 0.0, StopReason.NORMAL, 0, reason, ttl, hops, h=1)
            )
    return OracleResult(nodes, links, total, visits, per_dest, hits, records)


# --------------------------------------------------------------------------
# run metrics


@dataclass
class RunMetrics:
    nodes_discovered: int = 0
    links_discovered: int = 0
    non_responding_count: int = 0
    invalid_address_count: int = 0
    node_coverage: float = 0.0
    link_coverage: float = 0.0
    load_reduction: float = 0.0
    trace_probes: int = 0
    estimation_probes: int = 0
    oracle_probes: int = 0
    oracle_nodes: int = 0
    oracle_links: int = 0
    stopping_table: dict[str, dict] = field(default_factory=dict)
    distance_histograms: dict[str, dict[str, dict[int, int]]] = field(default_factory=dict)
    message_bytes: dict[str, int] = field(default_factory=dict)
    message_counts: dict[str, int] = field(default_factory=dict)
    interface_visits_max: int = 0
    nodes: set[Address] = field(default_factory=set, repr=False)
    links: set[tuple[Address, Address]] = field(default_factory=set, repr=False)


def _pct(count: int, total: int) -> float:
    return 100.0 * count / total if total else 0.0


def compute_metrics(
    records: Sequence[TraceRecord],
    messages: Iterable = (),
    oracle: OracleResult | None = None,
    destinations: Iterable[Address] | None = None,
    h_by_monitor: dict[Address, dict[int, int]] | None = None,
    estimation_probes: int = 0,
) -> RunMetrics:
    dest_set = set(destinations) if destinations is not None else {r.destination for r in records}
    nodes: set[Address] = set()
    links: set[tuple[Address, Address]] = set()
    seen: set[Address] = set()
    stars = 0
    visits: Counter = Counter()
    by_monitor: dict[Address, list[TraceRecord]] = {}
    for rec in records:
        nodes |= trace_nodes(rec.hops, dest_set)
        links |= trace_links(rec.hops)
        for hop in rec.hops:
            stars += sum(1 for a in hop.addresses if a is None)
            seen.update(hop.responders)
            visits.update(hop.responders)
        by_monitor.setdefault(rec.source, []).append(rec)

    m = RunMetrics(nodes=nodes, links=links)
    m.nodes_discovered = len(nodes)
    m.links_discovered = len(links)
    m.non_responding_count = stars
    m.invalid_address_count = sum(1 for a in seen if is_invalid(a))
    m.trace_probes = sum(r.probe_count for r in records)
    m.estimation_probes = estimation_probes
    m.interface_visits_max = max(visits.values(), default=0)
    if oracle is not None:
        m.oracle_probes = oracle.probe_count
        m.oracle_nodes = len(oracle.nodes)
        m.oracle_links = len(oracle.links)
        m.node_coverage = len(nodes & oracle.nodes) / len(oracle.nodes) if oracle.nodes else 0.0
        m.link_coverage = len(links & oracle.links) / len(oracle.links) if oracle.links else 0.0
        m.load_reduction = 1.0 - m.trace_probes / oracle.probe_count if oracle.probe_count else 0.0

    for monitor in sorted(by_monitor):
        recs = by_monitor[monitor]
        name = format_address(monitor)
        back = Counter(r.backward_reason for r in recs)
        fwd = Counter(r.forward_reason for r in recs)
        hs = list((h_by_monitor or {}).get(monitor, {}).values()) or [r.h for r in recs]
        m.stopping_table[name] = {
            "backward": {REASON_LABELS[k]: _pct(back[k], len(recs)) for k in REASON_ORDER},
            "forward": {REASON_LABELS[k]: _pct(fwd[k], len(recs)) for k in REASON_ORDER},
            "h": sum(hs) / len(hs) if hs else 0.0,
            "records": len(recs),
        }
        m.distance_histograms[name] = {
            "backward": dict(sorted(Counter(r.backward_stop_distance for r in recs).items())),
            "forward": dict(sorted(Counter(r.forward_stop_distance for r in recs).items())),
        }

    for msg in messages:
        name = format_address(msg.sender)
        m.message_bytes[name] = m.message_bytes.get(name, 0) + msg.size
        m.message_counts[name] = m.message_counts.get(name, 0) + len(msg.frames)
    return m


# --------------------------------------------------------------------------
# rendering


def _table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> list[str]:
    widths = [len(h) for h in headers]
    for row in rows:
        widths = [max(w, len(c)) for w, c in zip(widths, row)]
    fmt = lambda cells: "  ".join(  # noqa: E731
        c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths))
    ).rstrip()
    out = [fmt(headers), fmt(["-" * w for w in widths])]
    out.extend(fmt(r) for r in rows)
    return out


def _summary(m: RunMetrics) -> dict:
    return {
        "nodes_discovered": m.nodes_discovered,
        "links_discovered": m.links_discovered,
        "non_responding": m.non_responding_count,
        "invalid_addresses": m.invalid_address_count,
        "oracle_nodes": m.oracle_nodes,
        "oracle_links": m.oracle_links,
        "node_coverage": round(m.node_coverage, 6),
        "link_coverage": round(m.link_coverage, 6),
        "trace_probes": m.trace_probes,
        "estimation_probes": m.estimation_probes,
        "oracle_probes": m.oracle_probes,
        "load_reduction": round(m.load_reduction, 6),
        "max_interface_visits": m.interface_visits_max,
    }


def report(m: RunMetrics, format: str = "table") -> str:
    if format == "lines":
        return _report_lines(m)
    if format != "table":
        raise ValueError(f"unknown report format {format!r}")

    out = ["Summary"]
    out.extend(f"  {k:<20} {v}" for k, v in _summary(m).items())

    out += ["", "Stopping reasons (%) and h per monitor"]
    labels = [REASON_LABELS[r] for r in REASON_ORDER]
    headers = ["monitor", *(f"b.{l}" for l in labels), *(f"f.{l}" for l in labels), "h"]
    rows = []
    for name, row in m.stopping_table.items():
        rows.append(
            [name, *(f"{row['backward'][l]:.1f}" for l in labels), *(f"{row['forward'][l]:.1f}" for l in labels), f"{row['h']:.1f}"]
        )
    if rows:
        n = len(m.stopping_table)
        mean = lambda d, l: sum(r[d][l] for r in m.stopping_table.values()) / n  # noqa: E731
        rows.append(
            ["mean", *(f"{mean('backward', l):.1f}" for l in labels), *(f"{mean('forward', l):.1f}" for l in labels),
             f"{sum(r['h'] for r in m.stopping_table.values()) / n:.1f}"]
        )
    out.extend(_table(headers, rows))

    out += ["", "Stopping distance histograms (records per distance)"]
    hist_rows = []
    for name, hist in m.distance_histograms.items():
        distances = sorted(set(hist["backward"]) | set(hist["forward"]))
        for d in distances:
            hist_rows.append([name, str(d), str(hist["backward"].get(d, 0)), str(hist["forward"].get(d, 0))])
    out.extend(_table(["monitor", "distance", "backward", "forward"], hist_rows))

    out += ["", "StopSet messages per monitor (bytes include the 4-byte header)"]
    msg_rows = [
        [name, str(m.message_counts.get(name, 0)), str(size), f"{size / 1024:.2f}"]
        for name, size in sorted(m.message_bytes.items(), key=lambda kv: parse_address(kv[0]))
    ]
    if msg_rows:
        total = sum(m.message_bytes.values())
        msg_rows.append(["mean", f"{sum(m.message_counts.values()) / len(msg_rows):.1f}",
                         f"{total / len(msg_rows):.1f}", f"{total / len(msg_rows) / 1024:.2f}"])
    out.extend(_table(["monitor", "messages", "bytes", "KB"], msg_rows))
    return "\n".join(out) + "\n"


def _report_lines(m: RunMetrics) -> str:
    lines = [json.dumps({"kind": "summary", **_summary(m)}, sort_keys=True)]
    for name, row in m.stopping_table.items():
        lines.append(json.dumps({"kind": "stopping", "monitor": name, **row}, sort_keys=True))
    for name, hist in m.distance_histograms.items():
        for direction in ("backward", "forward"):
            for d, count in hist[direction].items():
                lines.append(json.dumps(
                    {"kind": "histogram", "monitor": name, "direction": direction, "distance": d, "count": count},
                    sort_keys=True,
                ))
    for name, size in sorted(m.message_bytes.items(), key=lambda kv: parse_address(kv[0])):
        lines.append(json.dumps(
            {"kind": "messages", "monitor": name, "count": m.message_counts.get(name, 0), "bytes": size},
            sort_keys=True,
        ))
    return "\n".join(lines) + "\n"
