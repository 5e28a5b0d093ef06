"""IPv4 addresses as plain 32-bit integers.

Everything in the package passes addresses around as ``int``; conversion to
dotted-quad text happens only at the edges (files, reports, CLI).
"""

from __future__ import annotations

import ipaddress

Address = int

MAX_ADDRESS = 0xFFFFFFFF

# Ranges that never show up as legitimate public interfaces.
_INVALID_NETWORKS = tuple(
    ipaddress.IPv4Network(net)
    for net in ("0.0.0.0/8", "10.0.0.0/8", "127.0.0.0/8", "172.16.0.0/12", "192.168.0.0/16")
)


def parse_address(text: str) -> Address:
    """Parse dotted-quad text into an integer address.

    Raises ``ValueError`` on anything that is not a well-formed IPv4 address.
    """
    return int(ipaddress.IPv4Address(text.strip()))


def format_address(addr: Address) -> str:
    return str(ipaddress.IPv4Address(addr))


def prefix_mask(prefix_len: int) -> int:
    if not 0 <= prefix_len <= 32:
        raise ValueError(f"prefix length must be in [0, 32], got {prefix_len}")
    return (MAX_ADDRESS << (32 - prefix_len)) & MAX_ADDRESS


def mask_address(addr: Address, prefix_len: int) -> Address:
    return addr & prefix_mask(prefix_len)


def is_invalid(addr: Address) -> bool:
    """True for private and reserved ranges (10/8, 172.16/12, 192.168/16, 0/8, 127/8)."""
    ip = ipaddress.IPv4Address(addr)
    return any(ip in net for net in _INVALID_NETWORKS)
