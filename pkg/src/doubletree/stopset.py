"""Local and global stop sets.

The local stop set is the set of interfaces a monitor has already seen.
The global stop set holds (interface, destination-key) pairs shared around
the monitor ring, either as an exact list or as a Bloom filter. With a
prefix length below 32 the destination half of every key is masked, so one
entry stands for a whole CIDR block of destinations.
"""

from __future__ import annotations

import hashlib
import itertools
import math
import struct
import threading
from typing import Iterable, Iterator, NamedTuple

from .address import Address, mask_address

PAIR_SIZE = 8
MAX_HASHES = 5  # five 32-bit words in one SHA-1 digest
DEFAULT_BLOOM_BITS = 10**7
DEFAULT_BLOOM_HASHES = 5

LIST = "list"
BLOOM = "bloom"
IMPLEMENTATIONS = (LIST, BLOOM)


class PairKey(NamedTuple):
    interface: Address
    dest_key: Address

    def to_bytes(self) -> bytes:
        return struct.pack(">II", self.interface, self.dest_key)


def make_key(interface: Address, destination: Address, prefix_len: int = 32) -> PairKey:
    return PairKey(interface, mask_address(destination, prefix_len))


class LocalStopSet:
    def __init__(self, interfaces: Iterable[Address] = ()) -> None:
        self._lock = threading.Lock()
        self._items: set[Address] = set(interfaces)

    def insert(self, addr: Address) -> None:
        with self._lock:
            self._items.add(addr)

    def __contains__(self, addr: object) -> bool:
        return addr in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Address]:
        return iter(sorted(self._items))


def local_insert(s: LocalStopSet, addr: Address) -> None:
    s.insert(addr)


def local_contains(s: LocalStopSet, addr: Address) -> bool:
    return addr in s


# --------------------------------------------------------------------------
# Bloom filter


def bloom_positions(key: PairKey | bytes, m: int, k: int) -> list[int]:
    """Bit positions for ``key``: the SHA-1 digest split into 32-bit big-endian words, each mod m."""
    if not 1 <= k <= MAX_HASHES:
        raise ValueError(f"k must be in [1, {MAX_HASHES}] with a single SHA-1 digest, got {k}")
    if m < 1:
        raise ValueError("m must be positive")
    data = key if isinstance(key, bytes) else key.to_bytes()
    words = struct.unpack(">5I", hashlib.sha1(data).digest())
    return [w % m for w in words[:k]]


class BloomFilter:
    def __init__(self, m: int = DEFAULT_BLOOM_BITS, k: int = DEFAULT_BLOOM_HASHES) -> None:
        if not 1 <= k <= MAX_HASHES:
            raise ValueError(f"k must be in [1, {MAX_HASHES}], got {k}")
        if not 1 <= m <= 0xFFFFFFFF:
            raise ValueError("m must fit in 32 bits")
        self.m = m
        self.k = k
        self.bits = bytearray((m + 7) // 8)
        self.inserted = 0

    def add(self, key: PairKey | bytes) -> None:
        for pos in bloom_positions(key, self.m, self.k):
            self.bits[pos >> 3] |= 0x80 >> (pos & 7)
        self.inserted += 1

    def __contains__(self, key: object) -> bool:
        return all(self.bits[pos >> 3] & (0x80 >> (pos & 7)) for pos in bloom_positions(key, self.m, self.k))  # type: ignore[arg-type]

    def merge(self, other: "BloomFilter") -> None:
        if (other.m, other.k) != (self.m, self.k):
            raise ValueError(f"cannot merge Bloom filters with (m, k)={other.m, other.k} into {self.m, self.k}")
        merged = int.from_bytes(self.bits, "big") | int.from_bytes(other.bits, "big")
        self.bits = bytearray(merged.to_bytes(len(self.bits), "big"))
        self.inserted += other.inserted

    def bits_set(self) -> int:
        return sum(bin(b).count("1") for b in self.bits)

    def to_bytes(self) -> bytes:
        """8-byte big-endian (m, k) descriptor followed by the bit vector."""
        return struct.pack(">II", self.m, self.k) + bytes(self.bits)

    @classmethod
    def from_bytes(cls, data: bytes) -> "BloomFilter":
        if len(data) < 8:
            raise ValueError("Bloom update shorter than its 8-byte descriptor")
        m, k = struct.unpack_from(">II", data)
        bf = cls(m, k)
        body = data[8:]
        if len(body) != len(bf.bits):
            raise ValueError(f"Bloom bit vector is {len(body)} bytes, expected {len(bf.bits)} for m={m}")
        bf.bits = bytearray(body)
        return bf


def expected_false_positive_rate(m: int, k: int, n: int) -> float:
    return (1.0 - math.exp(-k * n / m)) ** k


# --------------------------------------------------------------------------
# global stop set


class GlobalStopSet:
    def __init__(
        self,
        impl: str = LIST,
        prefix_len: int = 32,
        bloom_m: int = DEFAULT_BLOOM_BITS,
        bloom_k: int = DEFAULT_BLOOM_HASHES,
    ) -> None:
        if impl not in IMPLEMENTATIONS:
            raise ValueError(f"unknown stop set implementation {impl!r}")
        if not 0 <= prefix_len <= 32:
            raise ValueError(f"prefix length must be in [0, 32], got {prefix_len}")
        self.impl = impl
        self.prefix_len = prefix_len
        self._lock = threading.Lock()
        self._pairs: set[PairKey] = set()
        self.bloom = BloomFilter(bloom_m, bloom_k) if impl == BLOOM else None

    def key(self, interface: Address, destination: Address) -> PairKey:
        return make_key(interface, destination, self.prefix_len)

    def insert(self, key: PairKey) -> None:
        with self._lock:
            if self.bloom is not None:
                self.bloom.add(key)
            else:
                self._pairs.add(key)

    def __contains__(self, key: object) -> bool:
        if self.bloom is not None:
            return key in self.bloom
        return key in self._pairs

    def __len__(self) -> int:
        if self.bloom is not None:
            return self.bloom.inserted
        return len(self._pairs)

    def pairs(self) -> list[PairKey]:
        """Exact contents (list variant only)."""
        if self.bloom is not None:
            raise TypeError("a Bloom stop set cannot enumerate its keys")
        return sorted(self._pairs)

    def merge_filter(self, other: BloomFilter) -> None:
        if self.bloom is None:
            raise TypeError("list stop set cannot absorb a Bloom filter update")
        with self._lock:
            self.bloom.merge(other)


def global_insert(g: GlobalStopSet, key: PairKey) -> None:
    g.insert(key)


def global_contains(g: GlobalStopSet, key: PairKey) -> bool:
    return key in g


def merge_update(g: GlobalStopSet, pairs: Iterable[PairKey]) -> None:
    for key in pairs:
        g.insert(key)


# --------------------------------------------------------------------------
# update batches


def serialize_update(pairs: Iterable[PairKey]) -> bytes:
    flat = list(itertools.chain.from_iterable(pairs))
    return struct.pack(f">{len(flat)}I", *flat)


def parse_update(data: bytes) -> list[PairKey]:
    if len(data) % PAIR_SIZE:
        raise ValueError(f"stop set update of {len(data)} bytes is not a whole number of {PAIR_SIZE}-byte pairs")
    words = struct.unpack(f">{len(data) // 4}I", data)
    return [PairKey(words[i], words[i + 1]) for i in range(0, len(words), 2)]
