"""Simulated network: static routes plus per-interface responsiveness.

A :class:`SimTopology` answers the one question traceroute asks of the
network: what comes back when a probe with a given TTL is sent from a
monitor toward a destination.
"""

from __future__ import annotations

import enum
import hashlib
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import networkx as nx

from .address import Address, format_address, is_invalid, parse_address


class TopologyError(ValueError):
    """Invalid generator parameters or a route that breaks the topology invariants."""


class TopologyFormatError(TopologyError):
    def __init__(self, lineno: int, message: str, line: str = "") -> None:
        self.lineno = lineno
        context = f" ({line.strip()!r})" if line else ""
        super().__init__(f"line {lineno}: {message}{context}")


class UnknownRouteError(LookupError):
    """Probe requested for a (monitor, destination) pair that has no route."""


class ReplyKind(enum.Enum):
    TIME_EXCEEDED = "time_exceeded"
    DESTINATION_UNREACHABLE = "destination_unreachable"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class ProbeReply:
    kind: ReplyKind
    responder: Address | None = None
    rtt: float | None = None
    remaining_ttl: int | None = None

    @property
    def is_timeout(self) -> bool:
        return self.kind is ReplyKind.TIMEOUT


TIMEOUT_REPLY = ProbeReply(ReplyKind.TIMEOUT)


@dataclass(frozen=True)
class SimTopology:
    routes: Mapping[tuple[Address, Address], tuple[Address, ...]]
    nonresponders: frozenset[Address] = frozenset()
    seed: int = 0
    rtt_range: tuple[float, float] = (5.0, 300.0)

    def __post_init__(self) -> None:
        for (monitor, dest), hops in self.routes.items():
            _check_route(monitor, dest, hops)
        lo, hi = self.rtt_range
        if not 0 <= lo <= hi:
            raise TopologyError(f"bad RTT range {self.rtt_range}")

    @property
    def monitors(self) -> list[Address]:
        return sorted({m for m, _ in self.routes})

    @property
    def destinations(self) -> list[Address]:
        return sorted({d for _, d in self.routes})

    @property
    def interfaces(self) -> set[Address]:
        seen: set[Address] = set()
        for hops in self.routes.values():
            seen.update(hops)
        return seen

    @property
    def responders(self) -> dict[Address, bool]:
        return {a: a not in self.nonresponders for a in sorted(self.interfaces)}

    def is_responsive(self, addr: Address) -> bool:
        return addr not in self.nonresponders

    def route(self, monitor: Address, dest: Address) -> tuple[Address, ...]:
        try:
            return self.routes[(monitor, dest)]
        except KeyError:
            raise UnknownRouteError(
                f"no route from {format_address(monitor)} to {format_address(dest)}"
            ) from None

    def rtt(self, monitor: Address, responder: Address) -> float:
        digest = hashlib.sha256(f"{self.seed}:{monitor}:{responder}".encode()).digest()
        frac = int.from_bytes(digest[:8], "big") / 2**64
        lo, hi = self.rtt_range
        return round(lo + frac * (hi - lo), 3)

    def probe(self, monitor: Address, dest: Address, ttl: int) -> ProbeReply:
        if ttl < 1:
            raise ValueError(f"ttl must be >= 1, got {ttl}")
        hops = self.route(monitor, dest)
        length = len(hops)
        if ttl < length:
            hop = hops[ttl - 1]
            if not self.is_responsive(hop):
                return TIMEOUT_REPLY
            return ProbeReply(ReplyKind.TIME_EXCEEDED, hop, self.rtt(monitor, hop))
        if not self.is_responsive(dest):
            return TIMEOUT_REPLY
        return ProbeReply(
            ReplyKind.DESTINATION_UNREACHABLE,
            dest,
            self.rtt(monitor, dest),
            remaining_ttl=ttl - length + 1,
        )


def probe(topo: SimTopology, monitor: Address, dest: Address, ttl: int) -> ProbeReply:
    return topo.probe(monitor, dest, ttl)


def _check_route(monitor: Address, dest: Address, hops: tuple[Address, ...]) -> None:
    if len(hops) < 1:
        raise TopologyError(f"empty route {format_address(monitor)} -> {format_address(dest)}")
    if hops[-1] != dest:
        raise TopologyError(
            f"route {format_address(monitor)} -> {format_address(dest)} ends at "
            f"{format_address(hops[-1])}, not at the destination"
        )


# --------------------------------------------------------------------------
# generator


@dataclass(frozen=True)
class TopologyParams:
    """Knobs for :func:`generate_topology`.

    The core is a Barabasi-Albert graph; every monitor and destination hangs
    off it through a chain of access routers. With probability
    ``branch_prob`` a chain attaches to an existing access router instead of
    the core, which is what makes the access side tree-rich.
    """

    core_nodes: int = 40
    core_attach: int = 2
    access_depth: tuple[int, int] = (1, 4)
    branch_prob: float = 0.5
    nonresponder_fraction: float = 0.03
    dest_nonresponder_fraction: float = 0.05
    private_fraction: float = 0.01
    rtt_range: tuple[float, float] = (5.0, 300.0)

    def validate(self) -> list[str]:
        problems = []
        if self.core_attach < 1:
            problems.append("core_attach must be >= 1")
        if self.core_nodes <= self.core_attach:
            problems.append("core_nodes must exceed core_attach for a connected core")
        lo, hi = self.access_depth
        if not 1 <= lo <= hi:
            problems.append("access_depth must satisfy 1 <= min <= max")
        for name in ("branch_prob", "nonresponder_fraction", "dest_nonresponder_fraction", "private_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                problems.append(f"{name} must be in [0, 1]")
        if not 0 <= self.rtt_range[0] <= self.rtt_range[1]:
            problems.append("rtt_range must satisfy 0 <= min <= max")
        return problems

    @classmethod
    def from_dict(cls, data: Mapping) -> "TopologyParams":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise TopologyError(f"unknown generator parameters: {', '.join(sorted(unknown))}")
        kwargs = dict(data)
        for key in ("access_depth", "rtt_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def _random_public(rng: random.Random, used: set[Address]) -> Address:
    while True:
        addr = rng.randrange(1 << 24, 224 << 24)  # skip 0/8 and multicast and above
        if addr not in used and not is_invalid(addr):
            used.add(addr)
            return addr


def _random_private(rng: random.Random, used: set[Address]) -> Address:
    while True:
        addr = (10 << 24) | rng.randrange(1 << 24)
        if addr not in used:
            used.add(addr)
            return addr


def generate_topology(
    num_monitors: int,
    num_destinations: int,
    params: TopologyParams | None = None,
    seed: int = 0,
) -> SimTopology:
    """Build a random tree-rich network and the routes every monitor takes to every destination.

    Routes are weighted shortest paths with continuous random weights, so
    shortest paths are unique: routes out of one monitor form a tree and
    routes into one destination form a tree.
    """
    params = params or TopologyParams()
    if num_monitors < 1 or num_destinations < 1:
        raise TopologyError("need at least one monitor and one destination")
    problems = params.validate()
    if problems:
        raise TopologyError("; ".join(problems))

    rng = random.Random(seed)
    graph = nx.barabasi_albert_graph(params.core_nodes, params.core_attach, seed=rng.randrange(2**32))
    if not nx.is_connected(graph):
        raise TopologyError("core graph is not connected")
    core = list(graph.nodes)
    access: list[int] = []
    next_id = params.core_nodes

    def attach_endpoint() -> int:
        nonlocal next_id
        if access and rng.random() < params.branch_prob:
            anchor = rng.choice(access)
        else:
            anchor = rng.choice(core)
        depth = rng.randint(*params.access_depth)
        prev = anchor
        for _ in range(depth):
            graph.add_edge(prev, next_id)
            access.append(next_id)
            prev = next_id
            next_id += 1
        endpoint = next_id
        graph.add_edge(prev, endpoint)
        next_id += 1
        return endpoint

    monitor_nodes = [attach_endpoint() for _ in range(num_monitors)]
    dest_nodes = [attach_endpoint() for _ in range(num_destinations)]
    endpoints = set(monitor_nodes) | set(dest_nodes)

    for u, v in sorted(graph.edges):
        graph.edges[u, v]["weight"] = 1.0 + 0.25 * rng.random()

    used: set[Address] = set()
    addr_of: dict[int, Address] = {}
    for node in sorted(graph.nodes):
        if node not in endpoints and rng.random() < params.private_fraction:
            addr_of[node] = _random_private(rng, used)
        else:
            addr_of[node] = _random_public(rng, used)

    nonresponders = set()
    for node in sorted(graph.nodes):
        if node in monitor_nodes:
            continue
        frac = params.dest_nonresponder_fraction if node in endpoints else params.nonresponder_fraction
        if rng.random() < frac:
            nonresponders.add(addr_of[node])

    routes: dict[tuple[Address, Address], tuple[Address, ...]] = {}
    for mon in monitor_nodes:
        paths = nx.single_source_dijkstra_path(graph, mon, weight="weight")
        for dest in dest_nodes:
            routes[(addr_of[mon], addr_of[dest])] = tuple(addr_of[n] for n in paths[dest][1:])

    return SimTopology(
        routes=routes,
        nonresponders=frozenset(nonresponders),
        seed=seed,
        rtt_range=params.rtt_range,
    )


# --------------------------------------------------------------------------
# text format


def dump_topology(topo: SimTopology) -> str:
    lines = [
        "# doubletree topology",
        f"seed {topo.seed}",
        f"rtt {topo.rtt_range[0]!r} {topo.rtt_range[1]!r}",
    ]
    for addr in sorted(topo.nonresponders):
        lines.append(f"nonresponder {format_address(addr)}")
    for (monitor, dest) in sorted(topo.routes):
        hops = topo.routes[(monitor, dest)]
        fields = [monitor, dest, *hops]
        lines.append(" ".join(format_address(a) for a in fields))
    return "\n".join(lines) + "\n"


def parse_topology(text: str) -> SimTopology:
    seed = 0
    rtt_range = (5.0, 300.0)
    nonresponders: set[Address] = set()
    routes: dict[tuple[Address, Address], tuple[Address, ...]] = {}

    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        head, *rest = stripped.split()
        try:
            if head == "seed":
                if len(rest) != 1:
                    raise ValueError("expected 'seed <int>'")
                seed = int(rest[0])
            elif head == "rtt":
                if len(rest) != 2:
                    raise ValueError("expected 'rtt <min> <max>'")
                rtt_range = (float(rest[0]), float(rest[1]))
            elif head == "nonresponder":
                if len(rest) != 1:
                    raise ValueError("expected 'nonresponder <addr>'")
                nonresponders.add(parse_address(rest[0]))
            else:
                addrs = [parse_address(tok) for tok in stripped.split()]
                if len(addrs) < 3:
                    raise ValueError("route needs a monitor, a destination and at least one hop")
                monitor, dest, *hops = addrs
                if (monitor, dest) in routes:
                    raise ValueError("duplicate route")
                _check_route(monitor, dest, tuple(hops))
                routes[(monitor, dest)] = tuple(hops)
        except TopologyError as exc:
            raise TopologyFormatError(lineno, str(exc), line) from None
        except ValueError as exc:
            raise TopologyFormatError(lineno, str(exc), line) from None

    try:
        return SimTopology(routes=routes, nonresponders=frozenset(nonresponders), seed=seed, rtt_range=rtt_range)
    except TopologyError as exc:
        raise TopologyFormatError(0, str(exc)) from None


def save_topology(topo: SimTopology, path: str | Path) -> None:
    Path(path).write_text(dump_topology(topo), encoding="utf-8")


def load_topology(path: str | Path) -> SimTopology:
    return parse_topology(Path(path).read_text(encoding="utf-8"))


def topology_from_routes(
    routes: Iterable[tuple[str, str, Iterable[str]]],
    nonresponders: Iterable[str] = (),
    seed: int = 0,
    rtt_range: tuple[float, float] = (5.0, 300.0),
) -> SimTopology:
    """Convenience constructor from dotted-quad strings, mostly for fixtures."""
    table = {
        (parse_address(m), parse_address(d)): tuple(parse_address(h) for h in hops)
        for m, d, hops in routes
    }
    return SimTopology(
        routes=table,
        nonresponders=frozenset(parse_address(a) for a in nonresponders),
        seed=seed,
        rtt_range=rtt_range,
    )
