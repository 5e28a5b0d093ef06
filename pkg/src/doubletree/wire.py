"""Binary message framing between monitors.

Every message starts with a 4-byte header: a 16-bit length (header
included) and a 16-bit type, both big-endian. Type 0 is StopSet, whose
payload is::

    +--------+--------+-+-+-+-------------+----------------------+
    | window | slice  |s|i|c|  reserved   |  stop set bytes ...  |
    | 8 bits | 8 bits |1|1|1|   13 bits   |                      |
    +--------+--------+-+-+-+-------------+----------------------+

s: 0 = list, 1 = Bloom; i: 0 = IPv4, 1 = IPv6; c: 0 = raw, 1 = DEFLATE.
A list stop set is a run of 8-byte pairs (interface, destination). A Bloom
stop set is an 8-byte (m, k) descriptor followed by the bit vector.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Iterator

HEADER = struct.Struct(">HH")
HEADER_SIZE = HEADER.size
STOPSET_FIXED = struct.Struct(">BBH")
MAX_MESSAGE = 0xFFFF

TYPE_STOPSET = 0
MESSAGE_TYPES = {TYPE_STOPSET: "StopSet"}

FLAG_BLOOM = 0x8000
FLAG_IPV6 = 0x4000
FLAG_COMPRESSED = 0x2000
RESERVED_MASK = 0x1FFF

# largest multiple of 8 that fits in one frame next to both fixed headers
MAX_CHUNK = (MAX_MESSAGE - HEADER_SIZE - STOPSET_FIXED.size) // 8 * 8


class WireError(ValueError):
    def __init__(self, message: str, offset: int | None = None) -> None:
        self.offset = offset
        where = f" at byte offset {offset}" if offset is not None else ""
        super().__init__(f"{message}{where}")


def encode_message(msg_type: int, payload: bytes = b"") -> bytes:
    length = HEADER_SIZE + len(payload)
    if length > MAX_MESSAGE:
        raise WireError(f"message of {length} bytes exceeds the 16-bit length field; split the payload")
    if not 0 <= msg_type <= 0xFFFF:
        raise WireError(f"message type {msg_type} does not fit in 16 bits")
    return HEADER.pack(length, msg_type) + payload


def decode_message(data: bytes) -> tuple[int, bytes]:
    if len(data) < HEADER_SIZE:
        raise WireError(f"truncated header: {len(data)} of {HEADER_SIZE} bytes", offset=len(data))
    length, msg_type = HEADER.unpack_from(data)
    if length < HEADER_SIZE:
        raise WireError(f"declared length {length} is below the header size", offset=0)
    if len(data) < length:
        raise WireError(f"truncated message: declared {length} bytes, got {len(data)}", offset=len(data))
    if len(data) > length:
        raise WireError(f"declared length {length} but {len(data)} bytes supplied", offset=length)
    return msg_type, bytes(data[HEADER_SIZE:length])


def iter_messages(stream: bytes) -> Iterator[tuple[int, bytes]]:
    """Split a concatenation of frames, yielding (offset, frame)."""
    offset = 0
    while offset < len(stream):
        remaining = len(stream) - offset
        if remaining < HEADER_SIZE:
            raise WireError(f"truncated header ({remaining} trailing bytes)", offset=offset)
        (length,) = struct.unpack_from(">H", stream, offset)
        if length < HEADER_SIZE:
            raise WireError(f"declared length {length} is below the header size", offset=offset)
        if remaining < length:
            raise WireError(f"truncated message: declared {length} bytes, {remaining} available", offset=offset)
        yield offset, bytes(stream[offset : offset + length])
        offset += length


@dataclass(frozen=True)
class StopSetPayload:
    window: int
    slice: int
    bloom: bool = False
    ipv6: bool = False
    compressed: bool = False
    stopset: bytes = b""

    @property
    def flags(self) -> int:
        return (FLAG_BLOOM if self.bloom else 0) | (FLAG_IPV6 if self.ipv6 else 0) | (
            FLAG_COMPRESSED if self.compressed else 0
        )


def _check_stopset(payload: StopSetPayload, offset: int | None = None) -> None:
    if payload.ipv6:
        raise WireError("IPv6 stop sets are not supported", offset=offset)
    if not payload.bloom and not payload.compressed and len(payload.stopset) % 8:
        raise WireError(f"list stop set of {len(payload.stopset)} bytes is not a multiple of 8", offset=offset)


def encode_stopset(payload: StopSetPayload) -> bytes:
    """Full StopSet message, header included."""
    if not (0 <= payload.window <= 0xFF and 0 <= payload.slice <= 0xFF):
        raise WireError(f"window/slice ({payload.window}, {payload.slice}) must fit in 8 bits")
    _check_stopset(payload)
    body = STOPSET_FIXED.pack(payload.window, payload.slice, payload.flags) + payload.stopset
    return encode_message(TYPE_STOPSET, body)


def decode_stopset(data: bytes) -> StopSetPayload:
    msg_type, body = decode_message(data)
    if msg_type != TYPE_STOPSET:
        raise WireError(f"expected StopSet (type 0), got type {msg_type}", offset=2)
    if len(body) < STOPSET_FIXED.size:
        raise WireError("StopSet payload shorter than its 4 fixed bytes", offset=HEADER_SIZE + len(body))
    window, slice_, flags = STOPSET_FIXED.unpack_from(body)
    payload = StopSetPayload(
        window=window,
        slice=slice_,
        bloom=bool(flags & FLAG_BLOOM),
        ipv6=bool(flags & FLAG_IPV6),
        compressed=bool(flags & FLAG_COMPRESSED),
        stopset=bytes(body[STOPSET_FIXED.size :]),
    )
    _check_stopset(payload, offset=HEADER_SIZE + 2)
    return payload


def compress_update(data: bytes) -> bytes:
    comp = zlib.compressobj(9, zlib.DEFLATED, -15)
    return comp.compress(data) + comp.flush()


def decompress_update(data: bytes) -> bytes:
    decomp = zlib.decompressobj(-15)
    try:
        out = decomp.decompress(data) + decomp.flush()
    except zlib.error as exc:
        raise WireError(f"corrupt DEFLATE stream: {exc}") from None
    if not decomp.eof:
        raise WireError("truncated DEFLATE stream", offset=len(data))
    return out


def build_update(window: int, slice_: int, body: bytes, bloom: bool = False, compress: bool = False) -> list[bytes]:
    """Frame one stop set update, splitting it across messages when it exceeds one frame.

    Chunks carry the same window and slice; the receiver concatenates their
    stop set bytes in order.
    """
    if compress:
        body = compress_update(body)
    chunks = [body[i : i + MAX_CHUNK] for i in range(0, len(body), MAX_CHUNK)] or [b""]
    return [
        encode_stopset(StopSetPayload(window, slice_, bloom=bloom, compressed=compress, stopset=chunk))
        for chunk in chunks
    ]


def read_update(frames: list[bytes]) -> tuple[StopSetPayload, bytes]:
    """Inverse of :func:`build_update`: returns the first frame's header fields and the joined, decompressed body."""
    if not frames:
        raise WireError("empty update")
    payloads = [decode_stopset(f) for f in frames]
    first = payloads[0]
    for p in payloads[1:]:
        if (p.window, p.slice, p.bloom, p.compressed) != (first.window, first.slice, first.bloom, first.compressed):
            raise WireError("update chunks disagree on window, slice or flags")
    body = b"".join(p.stopset for p in payloads)
    if first.compressed:
        body = decompress_update(body)
    return first, body


def describe(frame: bytes) -> str:
    """Human-readable dump of one frame."""
    from .address import format_address
    from .stopset import BloomFilter, parse_update

    msg_type, body = decode_message(frame)
    lines = [f"length={len(frame)} type={msg_type} ({MESSAGE_TYPES.get(msg_type, 'unknown')})"]
    if msg_type != TYPE_STOPSET:
        lines.append(f"payload {len(body)} bytes: {body.hex()}")
        return "\n".join(lines)
    p = decode_stopset(frame)
    lines.append(
        f"window={p.window} slice={p.slice} flags="
        f"{'bloom' if p.bloom else 'list'}/{'IPv6' if p.ipv6 else 'IPv4'}/{'compressed' if p.compressed else 'raw'}"
    )
    body = p.stopset
    if p.compressed:
        try:
            body = decompress_update(body)
        except WireError:
            lines.append(f"compressed chunk, {len(p.stopset)} bytes (not independently decodable)")
            return "\n".join(lines)
    if p.bloom:
        try:
            bf = BloomFilter.from_bytes(body)
            lines.append(f"bloom m={bf.m} k={bf.k} bits_set={bf.bits_set()}")
        except ValueError:
            lines.append(f"bloom chunk, {len(body)} bytes")
        return "\n".join(lines)
    if len(body) % 8:
        raise WireError(f"list body of {len(body)} bytes is not a multiple of 8", offset=HEADER_SIZE + 4)
    pairs = parse_update(body)
    lines.append(f"pairs={len(pairs)}")
    lines.extend(f"  {format_address(i)} {format_address(d)}" for i, d in pairs)
    return "\n".join(lines)
