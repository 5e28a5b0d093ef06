from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from doubletree.coordinator import (
    ConfigError,
    Mailbox,
    MonitorConfig,
    State,
    plan_windows,
    ring_configs,
    run_monitor,
    run_system,
    validate_configs,
)
from doubletree.metrics import classic_oracle, trace_links
from doubletree.topology import generate_topology, topology_from_routes
from doubletree.wire import read_update

from conftest import ip


def _states(art):
    return [art.final_states[m] for m in art.monitors]


# -- window plans


def test_ten_by_two_hundred_geometry():
    plan = plan_windows(200, 10, 10)
    assert plan.window_size == 20
    assert all(len(plan.slices(k)) == 2 for k in range(10))
    assert plan.slices_per_monitor == 20


def test_round_robin_small():
    plan = plan_windows(4, 2, 2)
    assert plan.windows_for(0) == [range(0, 2), range(2, 4)]
    assert plan.windows_for(1) == [range(2, 4), range(0, 2)]


def test_plan_rejections():
    with pytest.raises(ConfigError):
        plan_windows(3, 4)
    with pytest.raises(ConfigError):
        plan_windows(20, 2, 11)


def test_uneven_split_and_short_final_slice():
    plan = plan_windows(23, 3, 3)
    assert [len(r) for r in plan.window_ranges] == [8, 8, 7]
    assert [len(s) for s in plan.slices(2)] == [3, 3, 1]


@given(n=st.integers(1, 120), m=st.integers(1, 12), step=st.integers(1, 12))
def test_active_windows_disjoint_and_complete(n, m, step):
    if n < m or step > -(-n // m):
        return
    plan = plan_windows(n, m, step)
    for t in range(m):
        active = [plan.window_at(j, t) for j in range(m)]
        assert sorted(active) == list(range(m))
    for j in range(m):
        covered = sorted(i for spec in plan.schedule(j) for i in spec.dest_indices)
        assert covered == list(range(n))


# -- configs


def test_mixed_implementations_rejected():
    mons = [ip("1.0.0.1"), ip("1.0.0.2")]
    cfgs = ring_configs(mons)
    cfgs[1] = MonitorConfig(mons[1], mons[0], stop_set_impl="bloom")
    problems = validate_configs(cfgs)
    assert any("stop_set_impl" in p for p in problems)
    topo = generate_topology(2, 4, seed=1)
    with pytest.raises(ConfigError):
        run_system(topo, [MonitorConfig(topo.monitors[0], topo.monitors[1]),
                          MonitorConfig(topo.monitors[1], topo.monitors[0], stop_set_impl="bloom")],
                   plan_windows(4, 2, 2), topo.destinations)


def test_config_problems_listed_together():
    cfg = MonitorConfig(1, 2, p=2.0, step_size=0, wait_period=-1)
    assert len(cfg.problems()) >= 3


# -- runs


def test_ten_monitors_twenty_messages_each(tree10):
    art = run_system(tree10, ring_configs(tree10.monitors), plan_windows(200, 10, 10), tree10.destinations)
    assert art.all_done
    for mon in tree10.monitors:
        assert sum(1 for msg in art.messages if msg.sender == mon) == 20
    assert len(art.messages) == 10 * 10 * 2


def test_single_monitor_never_waits():
    topo = generate_topology(1, 12, seed=4)
    art = run_system(topo, ring_configs(topo.monitors, step_size=4), plan_windows(12, 1, 4), topo.destinations)
    assert _states(art) == [State.DONE]
    assert not any(c.state is State.WAITING for c in art.state_logs[topo.monitors[0]])
    assert {msg.receiver for msg in art.messages} == set(topo.monitors)
    assert len(art.records) == 12


def test_two_monitors_tree_is_sound():
    topo = generate_topology(2, 4, seed=3)
    art = run_system(topo, ring_configs(topo.monitors, step_size=2), plan_windows(4, 2, 2), topo.destinations)
    assert _states(art) == [State.DONE, State.DONE]
    oracle = classic_oracle(topo, topo.monitors, topo.destinations)
    links = set().union(*(trace_links(r.hops) for r in art.records))
    assert links <= oracle.links


def test_failed_predecessor_after_forty_periods():
    topo = generate_topology(2, 20, seed=8)
    a, b = topo.monitors
    cfgs = [MonitorConfig(a, b, mute=True), MonitorConfig(b, a)]
    art = run_system(topo, cfgs, plan_windows(20, 2, 10), topo.destinations)
    assert art.final_states[a] is State.DONE
    assert art.final_states[b] is State.FAILED
    log = art.state_logs[b]
    waiting = next(c for c in log if c.state is State.WAITING)
    failed = log[-1]
    assert failed.state is State.FAILED and failed.periods == 40
    assert failed.time - waiting.time == pytest.approx(40 * 30.0)
    assert failed.probes_sent == waiting.probes_sent


def test_partial_results_when_a_monitor_fails():
    topo = generate_topology(3, 30, seed=2)
    cfgs = ring_configs(topo.monitors)
    cfgs[0] = MonitorConfig(topo.monitors[0], topo.monitors[1], mute=True)
    art = run_system(topo, cfgs, plan_windows(30, 3, 10), topo.destinations)
    assert _states(art) == [State.DONE, State.FAILED, State.FAILED]
    assert 0 < len(art.records) < 90


def test_waiting_sends_no_probes(tree10):
    art = run_system(tree10, ring_configs(tree10.monitors), plan_windows(200, 10, 10), tree10.destinations)
    for log in art.state_logs.values():
        for before, after in zip(log, log[1:]):
            if before.state is State.WAITING:
                assert after.probes_sent == before.probes_sent


def test_updates_merged_before_dependent_slice(tree10):
    art = run_system(tree10, ring_configs(tree10.monitors), plan_windows(200, 10, 10), tree10.destinations)
    plan = plan_windows(200, 10, 10)
    index = {m: j for j, m in enumerate(art.monitors)}
    first_probe = {}
    for rec in art.records:
        first_probe.setdefault((rec.source, rec.destination), rec.timestamp)
    for msg in art.messages:
        receiver = index[msg.receiver]
        if plan.window_at(receiver, 0) == msg.window:
            continue  # the receiver's own first window needs no update
        payload, _ = read_update(list(msg.frames))
        assert (payload.window, payload.slice) == (msg.window, msg.slice)
        for i in plan.slices(msg.window)[msg.slice]:
            assert first_probe[(msg.receiver, art.destinations[i])] >= msg.arrival


def test_sequential_and_threaded_records_match():
    topo = generate_topology(4, 40, seed=12)
    plan = plan_windows(40, 4, 5)
    seq = run_system(topo, ring_configs(topo.monitors, step_size=5), plan, topo.destinations)
    thr = run_system(topo, ring_configs(topo.monitors, step_size=5), plan, topo.destinations, scheduler="threaded")
    assert [r.to_json() for r in seq.records] == [r.to_json() for r in thr.records]
    assert [m.frames for m in seq.messages] == [m.frames for m in thr.messages]


def test_real_clock_waiting_machine():
    topo = generate_topology(2, 4, seed=5)
    a, b = topo.monitors
    cfgs = [MonitorConfig(a, b, mute=True, step_size=2, max_wait_periods=3),
            MonitorConfig(b, a, step_size=2, max_wait_periods=3)]
    art = run_system(topo, cfgs, plan_windows(4, 2, 2), topo.destinations,
                     clock="real", scheduler="threaded", time_scale=0.001)
    assert art.final_states[b] is State.FAILED
    assert art.state_logs[b][-1].periods == 3


def test_real_clock_needs_threads():
    topo = generate_topology(1, 2, seed=5)
    with pytest.raises(ConfigError):
        run_system(topo, ring_configs(topo.monitors, step_size=1), plan_windows(2, 1, 1), topo.destinations,
                   clock="real")


def test_run_monitor_with_prepared_mailbox():
    topo = topology_from_routes([
        ("1.0.0.1", "9.0.0.1", ["2.0.0.1", "9.0.0.1"]),
        ("1.0.0.1", "9.0.0.2", ["2.0.0.1", "9.0.0.2"]),
    ])
    cfg = MonitorConfig(ip("1.0.0.1"), ip("1.0.0.1"), step_size=1)
    agent, records, sent = run_monitor(cfg, plan_windows(2, 1, 1), topo, Mailbox(), topo.destinations)
    assert agent.state is State.DONE
    assert len(records) == 2 and len(sent) == 2


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2**32), m=st.integers(2, 5))
def test_message_conservation(seed, m):
    topo = generate_topology(m, 6 * m, seed=seed)
    plan = plan_windows(6 * m, m, 3)
    art = run_system(topo, ring_configs(topo.monitors, step_size=3), plan, topo.destinations)
    assert art.all_done
    assert len(art.messages) == m * plan.slices_per_monitor


def test_compressed_bloom_updates_smaller_than_raw_list(tree10):
    """Directional only: the update filter is sized to a slice (m = 8192 bits)."""
    plan = plan_windows(200, 10, 10)
    dests = tree10.destinations
    raw_list = run_system(tree10, ring_configs(tree10.monitors), plan, dests)
    bloom = run_system(tree10, ring_configs(tree10.monitors, stop_set_impl="bloom", bloom_m=8192, compress=True),
                       plan, dests)
    list_bytes = sum(m.size for m in raw_list.messages)
    bloom_bytes = sum(m.size for m in bloom.messages)
    print(f"compression factor list/bloom+deflate: {list_bytes / bloom_bytes:.2f}")
    assert bloom.all_done
    assert bloom_bytes < list_bytes
    payload, _ = read_update(list(bloom.messages[0].frames))
    assert payload.bloom and payload.compressed
