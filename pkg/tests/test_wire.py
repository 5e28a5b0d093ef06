from __future__ import annotations

import struct

import pytest
from hypothesis import given, strategies as st

from doubletree import FIXTURES
from doubletree.stopset import PairKey, parse_update, serialize_update
from doubletree.wire import (
    MAX_CHUNK,
    StopSetPayload,
    WireError,
    build_update,
    compress_update,
    decode_message,
    decode_stopset,
    decompress_update,
    describe,
    encode_message,
    encode_stopset,
    iter_messages,
    read_update,
)

from conftest import ip

ONE_PAIR = bytes.fromhex("0A000001C0A80005")


def _by_hand_stopset(window: int, slice_: int, s: int, i: int, c: int, body: bytes) -> bytes:
    """Independent assembly of the StopSet layout, field by field."""
    flags = (s << 15) | (i << 14) | (c << 13)
    payload = bytes([window, slice_]) + flags.to_bytes(2, "big") + body
    return (4 + len(payload)).to_bytes(2, "big") + (0).to_bytes(2, "big") + payload


def test_empty_message_golden():
    assert encode_message(0) == (FIXTURES / "empty_message.bin").read_bytes() == b"\x00\x04\x00\x00"


def test_one_pair_golden():
    msg = encode_stopset(StopSetPayload(3, 1, stopset=ONE_PAIR))
    assert msg == (FIXTURES / "stopset_one_pair.bin").read_bytes()
    assert msg == _by_hand_stopset(3, 1, 0, 0, 0, ONE_PAIR)
    assert len(msg) == 16


@given(st.integers(0, 255), st.integers(0, 255), st.booleans(), st.booleans(), st.binary(max_size=64))
def test_flag_layout_matches_hand_assembly(window, slice_, bloom, compressed, raw):
    body = raw if (bloom or compressed) else raw[: len(raw) // 8 * 8]
    msg = encode_stopset(StopSetPayload(window, slice_, bloom=bloom, compressed=compressed, stopset=body))
    assert msg == _by_hand_stopset(window, slice_, int(bloom), 0, int(compressed), body)


@given(st.integers(0, 0xFFFF), st.binary(max_size=2048))
def test_message_round_trip(msg_type, payload):
    data = encode_message(msg_type, payload)
    assert struct.unpack(">H", data[:2])[0] == len(data)
    assert decode_message(data) == (msg_type, payload)


def test_max_payload_round_trip():
    payload = bytes(range(256)) * 255 + bytes(65531 - 256 * 255)
    assert decode_message(encode_message(0, payload))[1] == payload
    with pytest.raises(WireError):
        encode_message(0, payload + b"x")


def test_truncated_message():
    data = b"\x00\x0a\x00\x00" + b"\x00" * 4
    with pytest.raises(WireError) as info:
        decode_message(data)
    assert info.value.offset == 8


@given(st.binary(max_size=64))
def test_decoder_never_crashes(data):
    try:
        decode_stopset(data)
    except WireError:
        pass
    try:
        list(iter_messages(data))
    except WireError:
        pass


def test_ipv6_is_rejected():
    frame = _by_hand_stopset(0, 0, 0, 1, 0, ONE_PAIR)
    with pytest.raises(WireError, match="IPv6"):
        decode_stopset(frame)


def test_list_bytes_must_be_whole_pairs():
    with pytest.raises(WireError):
        encode_stopset(StopSetPayload(0, 0, stopset=b"\x01" * 7))
    frame = _by_hand_stopset(0, 0, 0, 0, 0, b"\x01" * 7)
    with pytest.raises(WireError):
        decode_stopset(frame)


def test_reserved_bits_ignored_then_zeroed():
    frame = bytearray(_by_hand_stopset(3, 1, 0, 0, 0, ONE_PAIR))
    frame[6:8] = (0x1FFF).to_bytes(2, "big")
    payload = decode_stopset(bytes(frame))
    assert parse_update(payload.stopset) == [PairKey(ip("10.0.0.1"), ip("192.168.0.5"))]
    assert encode_stopset(payload) == (FIXTURES / "stopset_one_pair.bin").read_bytes()


def test_compressed_update_round_trip():
    pairs = [PairKey(i, 1000 + i % 7) for i in range(300)]
    frames = build_update(4, 1, serialize_update(pairs), compress=True)
    payload, body = read_update(frames)
    assert payload.compressed and (payload.window, payload.slice) == (4, 1)
    assert parse_update(body) == pairs


def test_compression_round_trips():
    data = bytes(range(256)) * 40
    assert decompress_update(compress_update(data)) == data
    assert decompress_update(compress_update(b"")) == b""
    repetitive = serialize_update([PairKey(ip("10.0.0.1"), ip("192.168.0.5"))] * 500)
    assert len(compress_update(repetitive)) < len(repetitive)


def test_corrupt_deflate_stream():
    with pytest.raises(WireError):
        decompress_update(b"\xff\xff\xff\xff")
    with pytest.raises(WireError):
        decompress_update(compress_update(b"abc" * 100)[:-3])


def test_large_update_is_chunked():
    pairs = [PairKey(i, i ^ 0xFFFF) for i in range(20000)]
    body = serialize_update(pairs)
    frames = build_update(7, 0, body)
    assert len(frames) == -(-len(body) // MAX_CHUNK)
    assert all(len(f) <= 0xFFFF for f in frames)
    assert all(decode_stopset(f).window == 7 for f in frames)
    assert parse_update(read_update(frames)[1]) == pairs


def test_iter_messages_reports_offset():
    one = (FIXTURES / "stopset_one_pair.bin").read_bytes()
    stream = one + one[:10]
    with pytest.raises(WireError) as info:
        list(iter_messages(stream))
    assert info.value.offset == 16


def test_describe_fixture():
    text = describe((FIXTURES / "stopset_one_pair.bin").read_bytes())
    assert "window=3 slice=1" in text
    assert "list/IPv4/raw" in text
    assert "pairs=1" in text
    assert "10.0.0.1 192.168.0.5" in text
