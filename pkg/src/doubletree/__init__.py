"""Cooperative traceroute (Doubletree) over simulated topologies."""

from __future__ import annotations

from pathlib import Path

from .address import format_address, parse_address
from .coordinator import MonitorConfig, plan_windows, ring_configs, run_system
from .engine import StopReason, TraceRecord, choose_h, probe_destination
from .metrics import classic_oracle, compute_metrics, report
from .topology import SimTopology, TopologyParams, generate_topology, load_topology

FIXTURES = Path(__file__).parent / "fixtures"

__all__ = [
    "FIXTURES",
    "MonitorConfig",
    "SimTopology",
    "StopReason",
    "TopologyParams",
    "TraceRecord",
    "choose_h",
    "classic_oracle",
    "compute_metrics",
    "format_address",
    "generate_topology",
    "load_topology",
    "parse_address",
    "plan_windows",
    "probe_destination",
    "report",
    "ring_configs",
    "run_system",
]
