"""Probe service: send TTL-limited probes, get back matched replies.

Replies are matched to requests the way a real traceroute matches ICMP
errors: through the quoted header of the original datagram, using the
unique source port (the token) *and* the destination address. Matching
never relies on arrival order.
"""

from __future__ import annotations

import abc
import threading
from dataclasses import dataclass
from typing import Iterable, Sequence

from .address import Address
from .topology import TIMEOUT_REPLY, ProbeReply, SimTopology

BASE_DPORT = 33434
DEFAULT_TIMEOUT_MS = 2000.0


class DuplicateTokenError(ValueError):
    """A token was reused while a probe carrying it is still outstanding."""


@dataclass(frozen=True)
class ProbeRequest:
    dest: Address
    ttl: int
    token: int

    def __post_init__(self) -> None:
        if self.ttl < 1:
            raise ValueError(f"ttl must be >= 1, got {self.ttl}")


@dataclass(frozen=True)
class EchoedReply:
    """A reply plus the fields quoted back from the original probe."""

    reply: ProbeReply
    echo_dest: Address
    echo_token: int
    echo_dport: int = BASE_DPORT


def match_reply(outstanding: Iterable[ProbeRequest], echoed: EchoedReply) -> ProbeRequest | None:
    """Return the request whose token and destination both match the echo, if any."""
    for req in outstanding:
        if req.token == echoed.echo_token and req.dest == echoed.echo_dest:
            return req
    return None


class ProbeService(abc.ABC):
    """What the probing engine needs from the network.

    ``elapsed`` is the (virtual) time in seconds the service has spent
    waiting for replies; ``probes_sent`` counts every probe put on the wire.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._next_token = 0
        self._outstanding: dict[int, ProbeRequest] = {}
        self.probes_sent = 0
        self.elapsed = 0.0

    def request(self, dest: Address, ttl: int) -> ProbeRequest:
        with self._lock:
            while True:
                token = self._next_token
                self._next_token = (self._next_token + 1) & 0xFFFF
                if token not in self._outstanding:
                    return ProbeRequest(dest, ttl, token)

    def send_probe(self, req: ProbeRequest) -> ProbeReply:
        return self.send_probes([req])[req.token]

    def send_probes(self, requests: Sequence[ProbeRequest]) -> dict[int, ProbeReply]:
        """Send several probes at once; returns replies keyed by token."""
        with self._lock:
            tokens = [r.token for r in requests]
            if len(set(tokens)) != len(tokens) or any(t in self._outstanding for t in tokens):
                raise DuplicateTokenError(f"token already outstanding among {tokens}")
            for req in requests:
                self._outstanding[req.token] = req
            self.probes_sent += len(requests)
        try:
            return self._exchange(list(requests))
        finally:
            with self._lock:
                for req in requests:
                    self._outstanding.pop(req.token, None)

    @abc.abstractmethod
    def _exchange(self, requests: list[ProbeRequest]) -> dict[int, ProbeReply]:
        ...


class SimulatedProbeService(ProbeService):
    """Probe service backed by a :class:`SimTopology`.

    ``port_corruption`` reproduces routers that rewrite the quoted UDP
    ports: ``"dport"`` rewrites only the destination port, ``"swap"``
    rewrites the source port so it points at another outstanding probe.
    """

    def __init__(
        self,
        topo: SimTopology,
        monitor: Address,
        timeout_ms: float = DEFAULT_TIMEOUT_MS,
        max_outstanding: int = 64,
        port_corruption: str | None = None,
    ) -> None:
        super().__init__()
        if port_corruption not in (None, "dport", "swap"):
            raise ValueError(f"unknown port corruption mode {port_corruption!r}")
        if max_outstanding < 1:
            raise ValueError("max_outstanding must be >= 1")
        self.topo = topo
        self.monitor = monitor
        self.timeout_ms = timeout_ms
        self.max_outstanding = max_outstanding
        self.port_corruption = port_corruption
        self.discarded = 0
        self.mismatched = 0

    def _exchange(self, requests: list[ProbeRequest]) -> dict[int, ProbeReply]:
        results: dict[int, ProbeReply] = {}
        for start in range(0, len(requests), self.max_outstanding):
            results.update(self._exchange_batch(requests[start : start + self.max_outstanding]))
        return results

    def _exchange_batch(self, batch: list[ProbeRequest]) -> dict[int, ProbeReply]:
        echoes: list[tuple[EchoedReply, int]] = []
        for i, req in enumerate(batch):
            reply = self.topo.probe(self.monitor, req.dest, req.ttl)
            if reply.is_timeout:
                continue
            token, dport = req.token, BASE_DPORT + req.ttl
            if self.port_corruption == "dport":
                dport ^= 0x5A5A
            elif self.port_corruption == "swap":
                token = batch[(i + 1) % len(batch)].token if len(batch) > 1 else token ^ 0x8000
                dport ^= 0x5A5A
            echoes.append((EchoedReply(reply, req.dest, token, dport), req.token))

        # arrival order follows RTT, not send order
        echoes.sort(key=lambda item: (item[0].reply.rtt, item[1]))

        pending = {req.token: req for req in batch}
        results: dict[int, ProbeReply] = {}
        slowest = 0.0
        for echoed, origin in echoes:
            req = match_reply(pending.values(), echoed)
            if req is None:
                self.discarded += 1
                continue
            if req.token != origin:
                self.mismatched += 1
            results[req.token] = echoed.reply
            del pending[req.token]
            slowest = max(slowest, echoed.reply.rtt or 0.0)
        for token in pending:
            results[token] = TIMEOUT_REPLY
        wait_ms = self.timeout_ms if pending else slowest
        self.elapsed += wait_ms / 1000.0
        return results


class RawSocketProbeService(ProbeService):
    """Placeholder for a real-network backend; the engine only sees the base contract."""

    def _exchange(self, requests: list[ProbeRequest]) -> dict[int, ProbeReply]:
        raise NotImplementedError("real-network probing is not available in this build")
