from __future__ import annotations

import pytest

from doubletree import FIXTURES
from doubletree.address import parse_address
from doubletree.topology import load_topology, topology_from_routes

A, B, C, D = "10.1.0.1", "10.1.0.2", "10.1.0.3", "10.1.0.4"
MON = "192.0.2.1"


def ip(s: str) -> int:
    return parse_address(s)


@pytest.fixture
def line_topo():
    """One monitor, one route A B C D."""
    return topology_from_routes([(MON, D, [A, B, C, D])])


@pytest.fixture(scope="session")
def tree10():
    return load_topology(FIXTURES / "tree10.topo")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
