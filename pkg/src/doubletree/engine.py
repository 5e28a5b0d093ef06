"""Per-destination Doubletree probing.

A monitor starts ``h`` hops out, probes forwards until it reaches the
destination or a hop already known for that destination (global stop set),
then probes backwards from ``h - 1`` until it reaches the first hop or an
interface it has already seen (local stop set). Loops and five silent hops
in a row also end a phase.
"""

from __future__ import annotations

import enum
import json
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Any, Sequence

from .address import Address, format_address, parse_address
from .probe import ProbeService
from .stopset import GlobalStopSet, LocalStopSet, PairKey
from .topology import ProbeReply, ReplyKind

GAP_LIMIT = 5
ESTIMATION_TTL = 64


class StopReason(enum.Enum):
    NORMAL = "normal"
    STOP_SET = "stop_set"
    LOOP = "loop"
    GAP = "gap"


class EmptyCdfError(ValueError):
    """No destination answered the path-length probes."""


@dataclass
class PathLengthCdf:
    """Path lengths seen by the estimator.

    ``total`` counts every destination probed, so ``F(max_distance)`` is the
    fraction of destinations that answered.
    """

    counts: dict[int, int]
    total: int

    def __post_init__(self) -> None:
        if self.total < sum(self.counts.values()):
            raise ValueError("total is smaller than the number of observed lengths")
        self._lengths = sorted(d for d, c in self.counts.items() for _ in range(c))

    @property
    def empty(self) -> bool:
        return not self.counts

    @property
    def max_distance(self) -> int:
        return max(self.counts) if self.counts else 0

    def F(self, d: int) -> float:
        if self.total == 0:
            return 0.0
        return bisect_right(self._lengths, d) / self.total


def inferred_length(sent_ttl: int, remaining_ttl: int) -> int:
    return sent_ttl - remaining_ttl + 1


def estimate_path_lengths(svc: ProbeService, dests: Sequence[Address]) -> PathLengthCdf:
    if not dests:
        raise ValueError("no destinations to estimate path lengths for")
    requests = [svc.request(d, ESTIMATION_TTL) for d in dests]
    replies = svc.send_probes(requests)
    counts: dict[int, int] = {}
    for req in requests:
        reply = replies[req.token]
        if reply.kind is ReplyKind.DESTINATION_UNREACHABLE and reply.remaining_ttl is not None:
            length = inferred_length(req.ttl, reply.remaining_ttl)
            counts[length] = counts.get(length, 0) + 1
    cdf = PathLengthCdf(counts, len(dests))
    if cdf.empty:
        raise EmptyCdfError(f"none of {len(dests)} destinations answered")
    return cdf


def choose_h(cdf: PathLengthCdf, p: float) -> int:
    """Largest distance whose CDF value stays within ``p``; never below 1."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    if cdf.empty:
        raise EmptyCdfError("cannot choose h from an empty CDF")
    h = 1
    for d in range(1, cdf.max_distance + 1):
        if cdf.F(d) <= p:
            h = d
    return h


# --------------------------------------------------------------------------
# records


@dataclass
class Hop:
    ttl: int
    addresses: list[Address | None]
    rtts: list[float] = field(default_factory=list)

    @property
    def responders(self) -> list[Address]:
        return [a for a in self.addresses if a is not None]

    def to_dict(self) -> dict[str, Any]:
        return {
            "ttl": self.ttl,
            "addresses": [format_address(a) if a is not None else "*" for a in self.addresses],
            "rtts": self.rtts,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Hop":
        return cls(
            ttl=int(data["ttl"]),
            addresses=[None if a == "*" else parse_address(a) for a in data["addresses"]],
            rtts=[float(r) for r in data["rtts"]],
        )


@dataclass
class TraceRecord:
    source: Address
    destination: Address
    timestamp: float
    backward_reason: StopReason
    backward_stop_distance: int
    forward_reason: StopReason
    forward_stop_distance: int
    hops: list[Hop]
    h: int = 0

    @property
    def probe_count(self) -> int:
        return len(self.hops)

    def to_dict(self) -> dict[str, Any]:
        return {
            "source": format_address(self.source),
            "destination": format_address(self.destination),
            "timestamp": self.timestamp,
            "backward_reason": self.backward_reason.value,
            "backward_stop_distance": self.backward_stop_distance,
            "forward_reason": self.forward_reason.value,
            "forward_stop_distance": self.forward_stop_distance,
            "h": self.h,
            "hops": [hop.to_dict() for hop in self.hops],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TraceRecord":
        return cls(
            source=parse_address(data["source"]),
            destination=parse_address(data["destination"]),
            timestamp=float(data["timestamp"]),
            backward_reason=StopReason(data["backward_reason"]),
            backward_stop_distance=int(data["backward_stop_distance"]),
            forward_reason=StopReason(data["forward_reason"]),
            forward_stop_distance=int(data["forward_stop_distance"]),
            hops=[Hop.from_dict(h) for h in data["hops"]],
            h=int(data.get("h", 0)),
        )


# --------------------------------------------------------------------------
# stopping rules


def decide_forward_stop(
    reply: ProbeReply,
    dest: Address,
    dest_key: Address,
    global_set: GlobalStopSet,
    path_so_far: set[Address] | Sequence[Address],
    gap_count: int,
    gap_limit: int = GAP_LIMIT,
) -> StopReason | None:
    """Stop reason after a forwards probe, or None to keep going.

    ``dest_key`` is the destination as the global stop set keys it (masked
    in prefix mode); ``gap_count`` is the run of consecutive timeouts
    including this reply.
    """
    if reply.kind is ReplyKind.DESTINATION_UNREACHABLE:
        return StopReason.NORMAL
    if reply.is_timeout:
        return StopReason.GAP if gap_count >= gap_limit else None
    if PairKey(reply.responder, dest_key) in global_set:
        return StopReason.STOP_SET
    if reply.responder in path_so_far:
        return StopReason.LOOP
    return None


def decide_backward_stop(
    reply: ProbeReply,
    local: LocalStopSet,
    current_ttl: int,
    path_so_far: set[Address] | Sequence[Address] = (),
    gap_count: int = 0,
    gap_limit: int = GAP_LIMIT,
) -> StopReason | None:
    if current_ttl < 1:
        raise ValueError("backwards probing never goes below ttl 1")
    if reply.is_timeout:
        if gap_count >= gap_limit:
            return StopReason.GAP
    elif reply.responder in local:
        return StopReason.STOP_SET
    elif reply.responder in path_so_far:
        return StopReason.LOOP
    return StopReason.NORMAL if current_ttl == 1 else None


# --------------------------------------------------------------------------
# the per-destination procedure


def _hop(ttl: int, reply: ProbeReply) -> Hop:
    if reply.is_timeout:
        return Hop(ttl, [None], [])
    return Hop(ttl, [reply.responder], [reply.rtt if reply.rtt is not None else 0.0])


def probe_destination(
    dest: Address,
    h: int,
    local: LocalStopSet,
    global_set: GlobalStopSet,
    svc: ProbeService,
    source: Address = 0,
    timestamp: float = 0.0,
    gap_limit: int = GAP_LIMIT,
) -> tuple[TraceRecord, list[PairKey]]:
    """Run forwards then backwards probing toward ``dest``.

    Returns the trace record and the (interface, destination-key) pairs this
    trace contributed, in discovery order, for the next stop set update.
    """
    if h < 1:
        raise ValueError(f"h must be >= 1, got {h}")
    hops: list[Hop] = []
    seen: set[Address] = set()
    new_pairs: dict[PairKey, None] = {}
    dest_key = global_set.key(0, dest).dest_key

    def record_responder(responder: Address) -> None:
        key = PairKey(responder, dest_key)
        global_set.insert(key)
        new_pairs[key] = None
        seen.add(responder)

    # forwards
    ttl = h
    gap = 0
    backward_start = h - 1
    while True:
        reply = svc.send_probe(svc.request(dest, ttl))
        hops.append(_hop(ttl, reply))
        gap = gap + 1 if reply.is_timeout else 0
        reason = decide_forward_stop(reply, dest, dest_key, global_set, seen, gap, gap_limit)
        if reply.responder is not None:
            record_responder(reply.responder)
        if ttl == h and reply.kind is ReplyKind.DESTINATION_UNREACHABLE and reply.remaining_ttl:
            # the first probe overshot: the path is shorter than h
            backward_start = min(h, inferred_length(ttl, reply.remaining_ttl)) - 1
        if reason is not None:
            forward_reason, forward_distance = reason, ttl
            break
        ttl += 1

    # backwards
    backward_reason, backward_distance = StopReason.NORMAL, 0
    gap = 0
    ttl = backward_start
    while ttl >= 1:
        reply = svc.send_probe(svc.request(dest, ttl))
        hops.append(_hop(ttl, reply))
        gap = gap + 1 if reply.is_timeout else 0
        reason = decide_backward_stop(reply, local, ttl, seen, gap, gap_limit)
        if reply.responder is not None:
            local.insert(reply.responder)
            record_responder(reply.responder)
        if reason is not None:
            backward_reason, backward_distance = reason, ttl
            break
        ttl -= 1

    hops.sort(key=lambda hop: hop.ttl)
    record = TraceRecord(
        source=source,
        destination=dest,
        timestamp=timestamp,
        backward_reason=backward_reason,
        backward_stop_distance=backward_distance,
        forward_reason=forward_reason,
        forward_stop_distance=forward_distance,
        hops=hops,
        h=h,
    )
    return record, list(new_pairs)
