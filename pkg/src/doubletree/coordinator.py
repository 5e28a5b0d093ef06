"""Sliding windows, the monitor ring, and end-to-end runs.

Monitors sit on a ring. The destination list is cut into ``m`` windows and
at logical step ``t`` monitor ``j`` works on window ``(j - t) mod m``, so the
window it probes is the one its predecessor finished one step earlier.
Each window is cut into slices of ``step_size`` destinations; after every
slice a monitor ships the pairs it discovered to its successor, and before
a slice that its predecessor already covered it waits for that update.

Waiting is the 30-second / 40-period machine: a monitor sleeps in whole
periods until the update is there, and gives up (Failed) after the last
period. Under the virtual clock, the number of periods is computed from the
update's arrival time, so the sequential and threaded drivers produce the
same records.
"""

from __future__ import annotations

import enum
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Generator, Iterable, Sequence

from .address import Address, format_address
from .engine import EmptyCdfError, TraceRecord, choose_h, estimate_path_lengths, probe_destination
from .probe import DEFAULT_TIMEOUT_MS, ProbeService, SimulatedProbeService
from .stopset import (
    BLOOM,
    DEFAULT_BLOOM_BITS,
    DEFAULT_BLOOM_HASHES,
    IMPLEMENTATIONS,
    BloomFilter,
    GlobalStopSet,
    LocalStopSet,
    PairKey,
    merge_update,
    parse_update,
    serialize_update,
)
from .topology import SimTopology
from .wire import build_update, read_update

log = logging.getLogger(__name__)

DEFAULT_P = 0.05
DEFAULT_STEP_SIZE = 10
DEFAULT_WAIT_PERIOD = 30.0
DEFAULT_MAX_WAIT_PERIODS = 40
DEFAULT_LINK_LATENCY = 0.05


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]) -> None:
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class MonitorConfig:
    id: Address
    next_monitor: Address
    p: float = DEFAULT_P
    step_size: int = DEFAULT_STEP_SIZE
    stop_set_impl: str = "list"
    prefix_len: int = 32
    compress: bool = False
    bloom_m: int = DEFAULT_BLOOM_BITS
    bloom_k: int = DEFAULT_BLOOM_HASHES
    wait_period: float = DEFAULT_WAIT_PERIOD
    max_wait_periods: int = DEFAULT_MAX_WAIT_PERIODS
    timeout_ms: float = DEFAULT_TIMEOUT_MS
    # fault injection: a mute monitor probes but never sends its updates
    mute: bool = False

    def problems(self) -> list[str]:
        name = format_address(self.id)
        out = []
        if not 0.0 <= self.p <= 1.0:
            out.append(f"{name}: p must be in [0, 1]")
        if self.step_size < 1:
            out.append(f"{name}: step_size must be >= 1")
        if self.stop_set_impl not in IMPLEMENTATIONS:
            out.append(f"{name}: stop_set_impl must be one of {', '.join(IMPLEMENTATIONS)}")
        if not 0 <= self.prefix_len <= 32:
            out.append(f"{name}: prefix_len must be in [0, 32]")
        if not 1 <= self.bloom_k <= 5:
            out.append(f"{name}: bloom_k must be in [1, 5]")
        if self.bloom_m < 1:
            out.append(f"{name}: bloom_m must be positive")
        if self.wait_period <= 0:
            out.append(f"{name}: wait_period must be positive")
        if self.max_wait_periods < 1:
            out.append(f"{name}: max_wait_periods must be >= 1")
        return out


# --------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class SliceSpec:
    step: int
    window: int
    slice: int
    dest_indices: range


@dataclass(frozen=True)
class WindowPlan:
    n: int
    m: int
    step_size: int
    window_ranges: tuple[range, ...]

    @property
    def window_size(self) -> int:
        return max(len(r) for r in self.window_ranges)

    def slices(self, window: int) -> list[range]:
        r = self.window_ranges[window]
        return [range(s, min(s + self.step_size, r.stop)) for s in range(r.start, r.stop, self.step_size)]

    def window_at(self, monitor: int, step: int) -> int:
        return (monitor - step) % self.m

    def windows_for(self, monitor: int) -> list[range]:
        return [self.window_ranges[self.window_at(monitor, t)] for t in range(self.m)]

    def schedule(self, monitor: int) -> list[SliceSpec]:
        out = []
        for t in range(self.m):
            k = self.window_at(monitor, t)
            for s, rng in enumerate(self.slices(k)):
                out.append(SliceSpec(t, k, s, rng))
        return out

    @property
    def slices_per_monitor(self) -> int:
        return sum(len(self.slices(k)) for k in range(self.m))


def plan_windows(n: int, m: int, step_size: int = DEFAULT_STEP_SIZE) -> WindowPlan:
    """Cut ``n`` destinations into ``m`` windows of (near) equal size ``n / m``.

    When ``n`` is not a multiple of ``m`` the first ``n % m`` windows get one
    extra destination. A final slice shorter than ``step_size`` is allowed.
    """
    if m < 1:
        raise ConfigError(["need at least one monitor"])
    if n < m:
        raise ConfigError([f"{n} destinations cannot fill {m} windows"])
    if m > 256:
        raise ConfigError(["window numbers are 8-bit on the wire: at most 256 monitors"])
    base, extra = divmod(n, m)
    ranges = []
    start = 0
    for k in range(m):
        size = base + (1 if k < extra else 0)
        ranges.append(range(start, start + size))
        start += size
    if not 1 <= step_size <= max(len(r) for r in ranges):
        raise ConfigError([f"step_size must be in [1, {max(len(r) for r in ranges)}], got {step_size}"])
    plan = WindowPlan(n, m, step_size, tuple(ranges))
    if max(len(plan.slices(k)) for k in range(m)) > 256:
        raise ConfigError(["slice numbers are 8-bit on the wire: at most 256 slices per window"])
    return plan


# --------------------------------------------------------------------------
# messaging


@dataclass(frozen=True)
class Message:
    sender: Address
    receiver: Address
    window: int
    slice: int
    frames: tuple[bytes, ...]
    sent_at: float
    arrival: float

    @property
    def size(self) -> int:
        return sum(len(f) for f in self.frames)


class Mailbox:
    """Inbox of one monitor; written by its predecessor only."""

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._messages: dict[tuple[int, int], Message] = {}
        self.closed = False

    def post(self, msg: Message) -> None:
        with self._cond:
            self._messages[(msg.window, msg.slice)] = msg
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self.closed = True
            self._cond.notify_all()

    def get(self, key: tuple[int, int]) -> Message | None:
        with self._cond:
            return self._messages.get(key)

    def ready(self, key: tuple[int, int]) -> bool:
        with self._cond:
            return key in self._messages or self.closed

    def wait_for(self, key: tuple[int, int], timeout: float | None = None) -> Message | None:
        with self._cond:
            self._cond.wait_for(lambda: key in self._messages or self.closed, timeout=timeout)
            return self._messages.get(key)


# --------------------------------------------------------------------------
# agent


class State(enum.Enum):
    PROBING = "probing"
    WAITING = "waiting"
    DONE = "done"
    FAILED = "failed"


@dataclass(frozen=True)
class StateChange:
    time: float
    state: State
    periods: int = 0
    probes_sent: int = 0
    detail: str = ""


class MonitorAgent:
    """One monitor: its stop sets, its probe service, and the probe/wait loop.

    :meth:`run` is a generator. It yields a ``(window, slice)`` key when it
    needs its predecessor's update and that update is not in the mailbox
    yet; the driver sends back the message, or None if it will never come.
    """

    def __init__(
        self,
        index: int,
        cfg: MonitorConfig,
        plan: WindowPlan,
        destinations: Sequence[Address],
        svc: ProbeService,
        inbox: Mailbox,
        outbox: Mailbox,
        start_time: float = 0.0,
        link_latency: float = DEFAULT_LINK_LATENCY,
        clock: str = "virtual",
        time_scale: float = 1.0,
    ) -> None:
        self.index = index
        self.cfg = cfg
        self.plan = plan
        self.destinations = list(destinations)
        self.svc = svc
        self.inbox = inbox
        self.outbox = outbox
        self.start_time = start_time
        self.link_latency = link_latency
        self.clock = clock
        self.time_scale = time_scale

        self.local = LocalStopSet()
        self.global_set = GlobalStopSet(cfg.stop_set_impl, cfg.prefix_len, cfg.bloom_m, cfg.bloom_k)
        self.records: list[TraceRecord] = []
        self.sent: list[Message] = []
        self.h_by_window: dict[int, int] = {}
        self.states: list[StateChange] = []
        self.estimation_probes = 0
        self.waiting_time = 0.0
        self._waited = 0.0
        self._real_t0 = time.monotonic()

    @property
    def state(self) -> State:
        return self.states[-1].state if self.states else State.PROBING

    @property
    def now(self) -> float:
        if self.clock == "real":
            return self.start_time + (time.monotonic() - self._real_t0) / self.time_scale
        return self.start_time + self.svc.elapsed + self._waited

    def _enter(self, state: State, periods: int = 0, detail: str = "") -> None:
        self.states.append(StateChange(self.now, state, periods, self.svc.probes_sent, detail))

    # -- update handling

    def _merge(self, msg: Message) -> None:
        payload, body = read_update(list(msg.frames))
        if payload.bloom != (self.global_set.impl == BLOOM):
            raise ValueError(f"{format_address(self.cfg.id)}: update uses a different stop set implementation")
        if payload.bloom:
            self.global_set.merge_filter(BloomFilter.from_bytes(body))
        else:
            merge_update(self.global_set, parse_update(body))

    def _send(self, window: int, slice_: int, pairs: list[PairKey]) -> None:
        if self.global_set.impl == BLOOM:
            bf = BloomFilter(self.cfg.bloom_m, self.cfg.bloom_k)
            for key in pairs:
                bf.add(key)
            body = bf.to_bytes()
        else:
            body = serialize_update(pairs)
        frames = build_update(window, slice_, body, bloom=self.global_set.impl == BLOOM, compress=self.cfg.compress)
        sent_at = self.now
        msg = Message(self.cfg.id, self.cfg.next_monitor, window, slice_, tuple(frames), sent_at, sent_at + self.link_latency)
        self.sent.append(msg)
        self.outbox.post(msg)

    def _wait_virtual(self, msg: Message | None) -> bool:
        """Account for waiting until ``msg`` arrives; False if the monitor gives up."""
        now = self.now
        if msg is not None and msg.arrival <= now:
            return True
        period, limit = self.cfg.wait_period, self.cfg.max_wait_periods
        if msg is None:
            periods = limit + 1
        else:
            periods = max(1, math.ceil((msg.arrival - now) / period - 1e-9))
        if periods > limit:
            self._enter(State.WAITING)
            self._waited += limit * period
            self.waiting_time += limit * period
            self._enter(State.FAILED, limit, "no update from predecessor")
            return False
        self._enter(State.WAITING)
        self._waited += periods * period
        self.waiting_time += periods * period
        self._enter(State.PROBING, periods)
        return True

    def _wait_real(self, key: tuple[int, int]) -> Message | None:
        self._enter(State.WAITING)
        for period in range(1, self.cfg.max_wait_periods + 1):
            time.sleep(self.cfg.wait_period * self.time_scale)
            msg = self.inbox.get(key)
            if msg is not None:
                self._enter(State.PROBING, period)
                return msg
        self._enter(State.FAILED, self.cfg.max_wait_periods, "no update from predecessor")
        return None

    # -- main loop

    def run(self) -> Generator[tuple[int, int], Message | None, State]:
        self._enter(State.PROBING)
        h = 1
        for spec in self.plan.schedule(self.index):
            key = (spec.window, spec.slice)
            if spec.step > 0:
                if self.clock == "real":
                    msg = self.inbox.get(key) or self._wait_real(key)
                    if msg is None:
                        return State.FAILED
                else:
                    msg = self.inbox.get(key)
                    if msg is None and not self.inbox.closed:
                        msg = yield key
                    if not self._wait_virtual(msg):
                        return State.FAILED
                assert msg is not None
                self._merge(msg)

            dests = [self.destinations[i] for i in spec.dest_indices]
            if spec.slice == 0:
                window_dests = [self.destinations[i] for i in self.plan.window_ranges[spec.window]]
                before = self.svc.probes_sent
                try:
                    h = choose_h(estimate_path_lengths(self.svc, window_dests), self.cfg.p)
                except EmptyCdfError:
                    log.warning("%s: no destination in window %d answered; keeping h=%d",
                                format_address(self.cfg.id), spec.window, h)
                self.estimation_probes += self.svc.probes_sent - before
                self.h_by_window[spec.window] = h

            slice_pairs: dict[PairKey, None] = {}
            for dest in dests:
                record, pairs = probe_destination(
                    dest, h, self.local, self.global_set, self.svc, source=self.cfg.id, timestamp=round(self.now, 6)
                )
                self.records.append(record)
                slice_pairs.update(dict.fromkeys(pairs))
            if not self.cfg.mute:
                self._send(spec.window, spec.slice, list(slice_pairs))
        self._enter(State.DONE)
        return State.DONE

    @property
    def trace_probes(self) -> int:
        return sum(r.probe_count for r in self.records)


# --------------------------------------------------------------------------
# drivers


@dataclass
class RunArtifacts:
    monitors: list[Address]
    destinations: list[Address]
    records: list[TraceRecord]
    messages: list[Message]
    final_states: dict[Address, State]
    state_logs: dict[Address, list[StateChange]]
    h_by_monitor: dict[Address, dict[int, int]]
    trace_probes: dict[Address, int]
    estimation_probes: dict[Address, int]
    waiting_time: dict[Address, float]
    end_time: dict[Address, float] = field(default_factory=dict)

    @property
    def all_done(self) -> bool:
        return all(s is State.DONE for s in self.final_states.values())


def _drive_sequential(agents: list[MonitorAgent]) -> None:
    gens = {a.index: a.run() for a in agents}
    blocked: dict[int, tuple[int, int] | None] = {a.index: None for a in agents}
    started: set[int] = set()
    live = set(gens)

    def step(a: MonitorAgent, value: Message | None) -> None:
        try:
            blocked[a.index] = gens[a.index].send(value)
        except StopIteration:
            live.discard(a.index)
            a.outbox.close()

    while live:
        progressed = False
        for a in agents:
            if a.index not in live:
                continue
            if a.index not in started:
                started.add(a.index)
                step(a, None)
                progressed = True
                continue
            key = blocked[a.index]
            if key is not None and a.inbox.ready(key):
                step(a, a.inbox.get(key))
                progressed = True
        if not progressed:
            # every live monitor waits on one that will never send
            for a in agents:
                if a.index in live:
                    step(a, None)
                    break


def _drive_threaded(agents: list[MonitorAgent]) -> None:
    def body(a: MonitorAgent) -> None:
        gen = a.run()
        try:
            key = next(gen)
            while True:
                key = gen.send(a.inbox.wait_for(key))
        except StopIteration:
            pass
        except Exception:
            log.exception("monitor %s crashed", format_address(a.cfg.id))
            a._enter(State.FAILED, detail="crashed")
        finally:
            a.outbox.close()

    threads = [threading.Thread(target=body, args=(a,), name=f"monitor-{a.index}") for a in agents]
    for t in threads:
        t.start()
    for t in threads:
        t.join()


def validate_configs(configs: Sequence[MonitorConfig]) -> list[str]:
    problems = []
    for cfg in configs:
        problems.extend(cfg.problems())
    if not configs:
        problems.append("no monitors configured")
        return problems
    for name in ("stop_set_impl", "prefix_len", "bloom_m", "bloom_k"):
        values = sorted({str(getattr(c, name)) for c in configs})
        if len(values) > 1:
            problems.append(f"all monitors must share one {name}, got {', '.join(values)}")
    ids = [c.id for c in configs]
    if len(set(ids)) != len(ids):
        problems.append("duplicate monitor ids")
    for j, cfg in enumerate(configs):
        expected = configs[(j + 1) % len(configs)].id
        if cfg.next_monitor != expected:
            problems.append(
                f"{format_address(cfg.id)}: next_monitor is {format_address(cfg.next_monitor)}, "
                f"ring order requires {format_address(expected)}"
            )
    steps = {c.step_size for c in configs}
    if len(steps) > 1:
        problems.append("all monitors must share one step_size")
    return problems


def ring_configs(monitors: Sequence[Address], **overrides) -> list[MonitorConfig]:
    """Monitor configs for a ring in the given order, with shared settings."""
    return [
        MonitorConfig(id=m, next_monitor=monitors[(j + 1) % len(monitors)], **overrides)
        for j, m in enumerate(monitors)
    ]


def run_system(
    topo: SimTopology,
    configs: Sequence[MonitorConfig],
    plan: WindowPlan,
    destinations: Sequence[Address],
    clock: str = "virtual",
    scheduler: str = "sequential",
    start_time: float = 0.0,
    link_latency: float = DEFAULT_LINK_LATENCY,
    time_scale: float = 1.0,
    services: dict[Address, ProbeService] | None = None,
) -> RunArtifacts:
    """Run every monitor until each is Done or Failed."""
    problems = validate_configs(configs)
    if len(destinations) != plan.n:
        problems.append(f"plan covers {plan.n} destinations, {len(destinations)} given")
    if len(configs) != plan.m:
        problems.append(f"plan is for {plan.m} monitors, {len(configs)} configured")
    if configs and configs[0].step_size != plan.step_size:
        problems.append("plan step size differs from the monitors' step_size")
    if clock not in ("virtual", "real"):
        problems.append(f"unknown clock {clock!r}")
    if scheduler not in ("sequential", "threaded"):
        problems.append(f"unknown scheduler {scheduler!r}")
    if clock == "real" and scheduler != "threaded":
        problems.append("the real-time clock needs the threaded scheduler")
    if problems:
        raise ConfigError(problems)

    mailboxes = [Mailbox() for _ in configs]
    agents = []
    for j, cfg in enumerate(configs):
        svc = (services or {}).get(cfg.id) or SimulatedProbeService(topo, cfg.id, timeout_ms=cfg.timeout_ms)
        agents.append(
            MonitorAgent(
                j, cfg, plan, destinations, svc,
                inbox=mailboxes[j],
                outbox=mailboxes[(j + 1) % len(configs)],
                start_time=start_time,
                link_latency=link_latency,
                clock=clock,
                time_scale=time_scale,
            )
        )

    if scheduler == "sequential":
        _drive_sequential(agents)
    else:
        _drive_threaded(agents)

    records = [r for a in agents for r in a.records]
    messages = sorted((m for a in agents for m in a.sent), key=lambda m: (m.sent_at, m.sender, m.window, m.slice))
    return RunArtifacts(
        monitors=[c.id for c in configs],
        destinations=list(destinations),
        records=records,
        messages=messages,
        final_states={a.cfg.id: a.state for a in agents},
        state_logs={a.cfg.id: a.states for a in agents},
        h_by_monitor={a.cfg.id: dict(a.h_by_window) for a in agents},
        trace_probes={a.cfg.id: a.trace_probes for a in agents},
        estimation_probes={a.cfg.id: a.estimation_probes for a in agents},
        waiting_time={a.cfg.id: a.waiting_time for a in agents},
        end_time={a.cfg.id: a.now for a in agents},
    )


def run_monitor(
    cfg: MonitorConfig,
    plan: WindowPlan,
    topo: SimTopology,
    mailbox: Mailbox,
    destinations: Sequence[Address],
    index: int = 0,
    outbox: Mailbox | None = None,
    svc: ProbeService | None = None,
) -> tuple[MonitorAgent, list[TraceRecord], list[Message]]:
    """Run a single monitor against a prepared mailbox (its predecessor is outside this call)."""
    agent = MonitorAgent(
        index, cfg, plan, destinations,
        svc or SimulatedProbeService(topo, cfg.id, timeout_ms=cfg.timeout_ms),
        inbox=mailbox,
        outbox=outbox if outbox is not None else Mailbox(),
    )
    gen = agent.run()
    try:
        key = next(gen)
        while True:
            key = gen.send(mailbox.get(key) if mailbox.ready(key) else None)
    except StopIteration:
        pass
    return agent, agent.records, agent.sent


def destinations_in_order(topo: SimTopology, dests: Iterable[Address] | None = None) -> list[Address]:
    return list(dests) if dests is not None else topo.destinations
