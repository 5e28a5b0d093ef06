from __future__ import annotations

import hashlib
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from doubletree.address import format_address
from doubletree.stopset import (
    BloomFilter,
    GlobalStopSet,
    LocalStopSet,
    PairKey,
    bloom_positions,
    expected_false_positive_rate,
    global_contains,
    global_insert,
    local_contains,
    local_insert,
    make_key,
    merge_update,
    parse_update,
    serialize_update,
)

from conftest import ip

u32 = st.integers(0, 2**32 - 1)
pairs = st.builds(PairKey, u32, u32)


def test_local_set_semantics():
    s = LocalStopSet()
    assert not local_contains(s, ip("10.0.0.1"))
    local_insert(s, ip("10.0.0.1"))
    local_insert(s, ip("10.0.0.1"))
    assert local_contains(s, ip("10.0.0.1"))
    assert len(s) == 1


@pytest.mark.parametrize(
    "dest, plen, expected",
    [("192.168.1.77", 24, "192.168.1.0"), ("192.168.1.77", 32, "192.168.1.77"), ("10.37.200.9", 8, "10.0.0.0")],
)
def test_make_key_masks_destination(dest, plen, expected):
    key = make_key(ip("1.2.3.4"), ip(dest), plen)
    assert key.interface == ip("1.2.3.4")
    assert format_address(key.dest_key) == expected


def test_list_membership_is_exact():
    g = GlobalStopSet("list")
    global_insert(g, PairKey(1, 2))
    assert global_contains(g, PairKey(1, 2))
    assert not global_contains(g, PairKey(1, 3))


def test_bloom_has_no_false_negatives_small():
    g = GlobalStopSet("bloom", bloom_m=10**5, bloom_k=5)
    rng = random.Random(1)
    keys = [PairKey(rng.getrandbits(32), rng.getrandbits(32)) for _ in range(100)]
    for key in keys:
        g.insert(key)
    assert all(key in g for key in keys)


def _sha1_words(data: bytes) -> list[int]:
    digest = hashlib.sha1(data).digest()
    return [int.from_bytes(digest[4 * i : 4 * i + 4], "big") for i in range(5)]


@given(pairs, st.integers(1, 10**7), st.integers(1, 5))
def test_bloom_positions_match_digest_words(key, m, k):
    words = _sha1_words(bytes.fromhex(f"{key.interface:08x}{key.dest_key:08x}"))
    positions = bloom_positions(key, m, k)
    assert positions == [w % m for w in words[:k]]
    assert positions == bloom_positions(key, m, k)
    assert all(0 <= p < m for p in positions)


def test_bloom_positions_frozen_fixture():
    # computed once from SHA-1 of the 8-byte keys, m = 10^7
    assert bloom_positions(PairKey(ip("10.0.0.1"), ip("192.168.0.5")), 10**7, 5) == [
        7797197, 9628681, 8434220, 5616797, 2044338,
    ]
    assert bloom_positions(PairKey(ip("10.0.0.2"), ip("192.168.0.5")), 10**7, 5) == [
        8140329, 9838849, 9036614, 2736341, 5584749,
    ]


def test_bloom_positions_distinct_on_corpus():
    rng = random.Random(2024)
    keys = {PairKey(rng.getrandbits(32), rng.getrandbits(32)) for _ in range(2000)}
    seen = {tuple(bloom_positions(k, 10**7, 5)) for k in keys}
    assert len(seen) == len(keys)


def test_k_is_capped_at_five():
    with pytest.raises(ValueError):
        bloom_positions(PairKey(0, 0), 100, 6)
    with pytest.raises(ValueError):
        BloomFilter(100, 0)


@settings(max_examples=40, deadline=None)
@given(st.lists(pairs, max_size=60), st.lists(pairs, max_size=60))
def test_list_and_bloom_agree_on_inserted_keys(inserted, probes):
    lst = GlobalStopSet("list")
    bloom = GlobalStopSet("bloom", bloom_m=4096, bloom_k=3)
    for key in inserted:
        lst.insert(key)
        bloom.insert(key)
    for key in inserted + probes:
        if key in lst:
            assert key in bloom


def test_bloom_bits_only_turn_on():
    bf = BloomFilter(1024, 4)
    before = bf.bits_set()
    assert before == 0
    for i in range(50):
        bf.add(PairKey(i, i + 1))
        assert bf.bits_set() >= before
        before = bf.bits_set()


def test_bloom_merge_and_serialize():
    a, b = BloomFilter(2048, 5), BloomFilter(2048, 5)
    a.add(PairKey(1, 2))
    b.add(PairKey(3, 4))
    a.merge(b)
    assert PairKey(1, 2) in a and PairKey(3, 4) in a
    back = BloomFilter.from_bytes(a.to_bytes())
    assert back.bits == a.bits and (back.m, back.k) == (2048, 5)
    with pytest.raises(ValueError):
        a.merge(BloomFilter(1024, 5))


def test_false_positive_formula():
    m, k, n = 10**5, 5, 10**4
    assert expected_false_positive_rate(m, k, n) == pytest.approx((1 - math.exp(-0.5)) ** 5)


def test_serialize_single_pair():
    assert serialize_update([PairKey(ip("10.0.0.1"), ip("192.168.0.5"))]) == bytes.fromhex("0A000001C0A80005")
    assert serialize_update([]) == b""


@given(st.lists(pairs, max_size=200))
def test_serialize_round_trip(keys):
    data = serialize_update(keys)
    assert len(data) == 8 * len(keys)
    assert parse_update(data) == keys


def test_parse_rejects_partial_pairs():
    with pytest.raises(ValueError):
        parse_update(b"\x00" * 12)


@given(st.lists(pairs, max_size=50))
def test_merge_update_is_idempotent(keys):
    once, twice = GlobalStopSet("list"), GlobalStopSet("list")
    merge_update(once, keys)
    merge_update(twice, keys)
    merge_update(twice, keys)
    assert once.pairs() == twice.pairs()
    assert all(k in once for k in keys)


def test_merge_into_bloom():
    g = GlobalStopSet("bloom", bloom_m=8192, bloom_k=5)
    keys = [PairKey(i * 7, i * 13) for i in range(100)]
    merge_update(g, keys)
    assert all(k in g for k in keys)


def test_bloom_set_cannot_enumerate():
    with pytest.raises(TypeError):
        GlobalStopSet("bloom", bloom_m=64).pairs()
