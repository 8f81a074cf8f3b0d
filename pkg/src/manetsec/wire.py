"""Canonical wire codec for routing messages and transport segments.

Every encoding is injective and every decoder is strict: minimal big-endian
integers, exact digest widths, zero padding bits, no trailing bytes. Parse
errors carry the byte position so a fuzzed or tampered input points at the
first offending field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

from .crypto import AggregateSignature, DIGEST_BYTES, digest, digest_int

KIND_RREQ = 0x01
KIND_RREP = 0x02
KIND_RERR = 0x03
KIND_SEGMENT = 0x10
KIND_DATA = 0x11

ROLE_SYN = 1
ROLE_SYN_ACK = 2
ROLE_ACK = 3
ROLE_DATA = 4
ROLE_FIN = 5
ROLE_FIN_ACK = 6

MODE_AGGREGATE_FULL = 0
MODE_SOURCE_PLUS_LAST = 1

ROUTE_KIND_NAMES = {KIND_RREQ: "RREQ", KIND_RREP: "RREP", KIND_RERR: "RERR"}
ROLE_NAMES = {ROLE_SYN: "SYN", ROLE_SYN_ACK: "SYN_ACK", ROLE_ACK: "ACK",
              ROLE_DATA: "DATA", ROLE_FIN: "FIN", ROLE_FIN_ACK: "FIN_ACK"}


class ParseError(ValueError):
    def __init__(self, position: int, reason: str):
        super().__init__("offset %d: %s" % (position, reason))
        self.position = position
        self.reason = reason


# --- primitive fields -------------------------------------------------------

def encode_bigint(value: int) -> bytes:
    if value < 0:
        raise ValueError("big integers on the wire are unsigned")
    if value == 0:
        return b"\x00\x00\x00\x00"
    width = (value.bit_length() + 7) // 8
    return width.to_bytes(4, "big") + value.to_bytes(width, "big")


def read_bigint(data: bytes, pos: int) -> Tuple[int, int]:
    length, pos = _read_uint(data, pos, 4)
    if pos + length > len(data):
        raise ParseError(pos, "integer truncated (need %d bytes)" % length)
    raw = data[pos:pos + length]
    if length > 0 and raw[0] == 0:
        raise ParseError(pos, "non-minimal integer encoding")
    return int.from_bytes(raw, "big"), pos + length


def _read_uint(data: bytes, pos: int, width: int) -> Tuple[int, int]:
    if pos + width > len(data):
        raise ParseError(pos, "truncated %d-byte integer" % width)
    return int.from_bytes(data[pos:pos + width], "big"), pos + width


def _encode_uint(value: int, width: int) -> bytes:
    if not 0 <= value < (1 << (8 * width)):
        raise ValueError("field out of range for %d bytes: %r" % (width, value))
    return value.to_bytes(width, "big")


def _encode_token(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("token too long")
    return len(raw).to_bytes(2, "big") + raw


def _read_token(data: bytes, pos: int) -> Tuple[str, int]:
    length, pos = _read_uint(data, pos, 2)
    if pos + length > len(data):
        raise ParseError(pos, "token truncated")
    try:
        return data[pos:pos + length].decode("utf-8"), pos + length
    except UnicodeDecodeError:
        raise ParseError(pos, "token is not valid utf-8") from None


def _read_digest(data: bytes, pos: int) -> Tuple[bytes, int]:
    if pos + DIGEST_BYTES > len(data):
        raise ParseError(pos, "truncated digest")
    return data[pos:pos + DIGEST_BYTES], pos + DIGEST_BYTES


def encode_public(public: Tuple[int, int]) -> bytes:
    """Canonical public key bytes: the id preimage and signing-hash suffix."""
    return encode_bigint(public[0]) + encode_bigint(public[1])


# --- routing messages -------------------------------------------------------

@dataclass(frozen=True)
class RouteCore:
    """Immutable originator-owned part of a routing message.

    Per-kind fields stay at their defaults for the other kinds; the encoder
    enforces that so encodings stay injective.
    """

    kind: int
    src_ip: str
    src_id: bytes
    src_seq: int
    bct_id: int
    dst_ip: str
    dst_seq: int = 0              # replies only
    dh_p: int = 0                 # requests only
    dh_g: int = 0                 # requests only
    dh_payload: int = 0           # requests carry R2, replies carry R4
    originator_id: bytes = b""    # error reports only


@dataclass(frozen=True)
class RouteMessage:
    core: RouteCore
    hops: Tuple[bytes, ...]
    sig_mode: int
    sec_level: int
    aggregate: Optional[AggregateSignature]
    source_sig: Optional[int]


@dataclass(frozen=True)
class Segment:
    role: int
    src_port: int
    dst_port: int
    seq: int
    ack: int
    payload: bytes
    tag: bytes

    def tag_input(self) -> bytes:
        """Everything the authentication tag covers: all fields but itself."""
        return _segment_body(self)


@dataclass(frozen=True)
class DataPacket:
    """Minimal forwarding envelope; deliberately unauthenticated."""

    src_ip: str
    dst_ip: str
    segment: Segment


Message = Union[RouteMessage, Segment, DataPacket]


def encode_core(core: RouteCore) -> bytes:
    if core.kind not in ROUTE_KIND_NAMES:
        raise ValueError("unknown routing kind %r" % core.kind)
    if len(core.src_id) != DIGEST_BYTES:
        raise ValueError("source id must be %d bytes" % DIGEST_BYTES)
    _require_defaults(core)
    out = bytearray()
    out += bytes([core.kind])
    out += _encode_token(core.src_ip)
    out += core.src_id
    out += _encode_uint(core.src_seq, 8)
    out += _encode_uint(core.bct_id, 8)
    out += _encode_token(core.dst_ip)
    if core.kind == KIND_RREQ:
        out += encode_bigint(core.dh_p)
        out += encode_bigint(core.dh_g)
        out += encode_bigint(core.dh_payload)
    elif core.kind == KIND_RREP:
        out += _encode_uint(core.dst_seq, 8)
        out += encode_bigint(core.dh_payload)
    else:
        if len(core.originator_id) != DIGEST_BYTES:
            raise ValueError("error reports need a 32-byte originator id")
        out += core.originator_id
    return bytes(out)


def _require_defaults(core: RouteCore) -> None:
    stray = []
    if core.kind != KIND_RREP and core.dst_seq != 0:
        stray.append("dst_seq")
    if core.kind != KIND_RREQ and (core.dh_p != 0 or core.dh_g != 0):
        stray.append("dh_p/dh_g")
    if core.kind == KIND_RERR and core.dh_payload != 0:
        stray.append("dh_payload")
    if core.kind != KIND_RERR and core.originator_id != b"":
        stray.append("originator_id")
    if stray:
        raise ValueError("fields not used by this kind: %s" % ", ".join(stray))


def _read_core(data: bytes, pos: int) -> Tuple[RouteCore, int]:
    kind = data[pos]
    pos += 1
    src_ip, pos = _read_token(data, pos)
    src_id, pos = _read_digest(data, pos)
    src_seq, pos = _read_uint(data, pos, 8)
    bct_id, pos = _read_uint(data, pos, 8)
    dst_ip, pos = _read_token(data, pos)
    fields = dict(kind=kind, src_ip=src_ip, src_id=src_id, src_seq=src_seq,
                  bct_id=bct_id, dst_ip=dst_ip)
    if kind == KIND_RREQ:
        fields["dh_p"], pos = read_bigint(data, pos)
        fields["dh_g"], pos = read_bigint(data, pos)
        fields["dh_payload"], pos = read_bigint(data, pos)
    elif kind == KIND_RREP:
        fields["dst_seq"], pos = _read_uint(data, pos, 8)
        fields["dh_payload"], pos = read_bigint(data, pos)
    else:
        fields["originator_id"], pos = _read_digest(data, pos)
    return RouteCore(**fields), pos


def _encode_route_message(msg: RouteMessage) -> bytes:
    out = bytearray(encode_core(msg.core))
    out += _encode_uint(len(msg.hops), 4)
    for hop in msg.hops:
        if len(hop) != DIGEST_BYTES:
            raise ValueError("hop records are 32-byte ids")
        out += hop
    if msg.sig_mode not in (MODE_AGGREGATE_FULL, MODE_SOURCE_PLUS_LAST):
        raise ValueError("bad signature mode %r" % msg.sig_mode)
    if msg.sec_level not in (0, 1):
        raise ValueError("bad security level %r" % msg.sec_level)
    out += bytes([msg.sig_mode, msg.sec_level])
    agg = msg.aggregate
    if agg is None:
        out += _encode_uint(0, 4)
    else:
        if agg.signer_count < 1:
            raise ValueError("aggregate with no signers")
        if len(agg.overflow_bits) != agg.signer_count - 1:
            raise ValueError("overflow bits misaligned with signer count")
        out += _encode_uint(agg.signer_count, 4)
        out += encode_bigint(agg.value)
        out += _encode_uint(len(agg.overflow_bits), 4)
        out += _pack_bits(agg.overflow_bits)
    if msg.source_sig is None:
        out += b"\x00"
    else:
        out += b"\x01" + encode_bigint(msg.source_sig)
    return bytes(out)


def _pack_bits(bits: Tuple[int, ...]) -> bytes:
    out = bytearray((len(bits) + 7) // 8)
    for i, bit in enumerate(bits):
        if bit not in (0, 1):
            raise ValueError("overflow bits are 0 or 1")
        if bit:
            out[i // 8] |= 0x80 >> (i % 8)
    return bytes(out)


def _read_route_message(data: bytes, pos: int) -> Tuple[RouteMessage, int]:
    core, pos = _read_core(data, pos)
    count, pos = _read_uint(data, pos, 4)
    if pos + count * DIGEST_BYTES > len(data):
        raise ParseError(pos, "hop list truncated")
    hops = tuple(data[pos + i * DIGEST_BYTES:pos + (i + 1) * DIGEST_BYTES]
                 for i in range(count))
    pos += count * DIGEST_BYTES
    sig_mode, pos = _read_uint(data, pos, 1)
    if sig_mode not in (MODE_AGGREGATE_FULL, MODE_SOURCE_PLUS_LAST):
        raise ParseError(pos - 1, "bad signature mode %d" % sig_mode)
    sec_level, pos = _read_uint(data, pos, 1)
    if sec_level not in (0, 1):
        raise ParseError(pos - 1, "bad security level %d" % sec_level)
    signer_count, pos = _read_uint(data, pos, 4)
    aggregate = None
    if signer_count:
        value, pos = read_bigint(data, pos)
        nbits, pos = _read_uint(data, pos, 4)
        if nbits != signer_count - 1:
            raise ParseError(pos - 4, "overflow bit count %d != signers-1 %d"
                             % (nbits, signer_count - 1))
        nbytes = (nbits + 7) // 8
        if pos + nbytes > len(data):
            raise ParseError(pos, "overflow bits truncated")
        packed = data[pos:pos + nbytes]
        bits = tuple((packed[i // 8] >> (7 - i % 8)) & 1 for i in range(nbits))
        for i in range(nbits, nbytes * 8):
            if (packed[i // 8] >> (7 - i % 8)) & 1:
                raise ParseError(pos, "nonzero padding bit")
        pos += nbytes
        aggregate = AggregateSignature(value=value, overflow_bits=bits,
                                       signer_count=signer_count)
    flag, pos = _read_uint(data, pos, 1)
    if flag not in (0, 1):
        raise ParseError(pos - 1, "bad standalone-signature flag")
    source_sig = None
    if flag:
        source_sig, pos = read_bigint(data, pos)
    return RouteMessage(core=core, hops=hops, sig_mode=sig_mode,
                        sec_level=sec_level, aggregate=aggregate,
                        source_sig=source_sig), pos


# --- transport segments -----------------------------------------------------

def _segment_body(seg: Segment) -> bytes:
    if seg.role not in ROLE_NAMES:
        raise ValueError("unknown segment role %r" % seg.role)
    out = bytearray([KIND_SEGMENT, seg.role])
    out += _encode_uint(seg.src_port, 8)
    out += _encode_uint(seg.dst_port, 8)
    out += _encode_uint(seg.seq, 8)
    out += _encode_uint(seg.ack, 8)
    out += _encode_uint(len(seg.payload), 4)
    out += seg.payload
    return bytes(out)


def _encode_segment(seg: Segment) -> bytes:
    if len(seg.tag) != DIGEST_BYTES:
        raise ValueError("segment tag must be %d bytes" % DIGEST_BYTES)
    return _segment_body(seg) + seg.tag


def _read_segment(data: bytes, pos: int) -> Tuple[Segment, int]:
    role, pos = _read_uint(data, pos, 1)
    if role not in ROLE_NAMES:
        raise ParseError(pos - 1, "unknown segment role %d" % role)
    src_port, pos = _read_uint(data, pos, 8)
    dst_port, pos = _read_uint(data, pos, 8)
    seq, pos = _read_uint(data, pos, 8)
    ack, pos = _read_uint(data, pos, 8)
    plen, pos = _read_uint(data, pos, 4)
    if pos + plen > len(data):
        raise ParseError(pos, "payload truncated")
    payload = data[pos:pos + plen]
    pos += plen
    tag, pos = _read_digest(data, pos)
    return Segment(role=role, src_port=src_port, dst_port=dst_port, seq=seq,
                   ack=ack, payload=payload, tag=tag), pos


# --- top level ---------------------------------------------------------------

def encode_message(msg: Message) -> bytes:
    if isinstance(msg, RouteMessage):
        return _encode_route_message(msg)
    if isinstance(msg, Segment):
        return _encode_segment(msg)
    if isinstance(msg, DataPacket):
        return (bytes([KIND_DATA]) + _encode_token(msg.src_ip)
                + _encode_token(msg.dst_ip) + _encode_segment(msg.segment))
    raise TypeError("cannot encode %r" % type(msg))


def decode_message(data: bytes) -> Message:
    if not data:
        raise ParseError(0, "empty message")
    kind = data[0]
    if kind in ROUTE_KIND_NAMES:
        msg, pos = _read_route_message(data, 0)
    elif kind == KIND_SEGMENT:
        msg, pos = _read_segment(data, 1)
    elif kind == KIND_DATA:
        pos = 1
        src_ip, pos = _read_token(data, pos)
        dst_ip, pos = _read_token(data, pos)
        if pos >= len(data) or data[pos] != KIND_SEGMENT:
            raise ParseError(pos, "envelope must contain a segment")
        seg, pos = _read_segment(data, pos + 1)
        msg = DataPacket(src_ip=src_ip, dst_ip=dst_ip, segment=seg)
    else:
        raise ParseError(0, "unknown message kind 0x%02x" % kind)
    if pos != len(data):
        raise ParseError(pos, "%d trailing bytes" % (len(data) - pos))
    return msg


def describe(data: bytes) -> str:
    """Human label for trace records; tolerant of undecodable payloads."""
    try:
        msg = decode_message(data)
    except ParseError:
        return "RAW"
    if isinstance(msg, RouteMessage):
        return ROUTE_KIND_NAMES[msg.core.kind]
    if isinstance(msg, DataPacket):
        return ROLE_NAMES[msg.segment.role]
    return ROLE_NAMES[msg.role]


# --- signing views -----------------------------------------------------------

def signing_view(core: RouteCore, hops: Tuple[bytes, ...], index: int) -> bytes:
    """Byte view signer `index` commits to: core plus the first `index` hops.

    Index 0 is the originator; appending one hop record extends the view by
    exactly that record, nothing else.
    """
    if not 0 <= index <= len(hops):
        raise ValueError("signer index %d out of range" % index)
    return encode_core(core) + b"".join(hops[:index])


def signer_hash(core: RouteCore, hops: Tuple[bytes, ...], index: int,
                public: Tuple[int, int]) -> int:
    """Hash that signer `index` actually signs: its view plus its own key."""
    return digest_int(digest(signing_view(core, hops, index)
                             + encode_public(public)))
