"""Multipurpose covert channel: 6-bit PDU headers in unused packet fields,
PDU payloads in the gateway watermark layer, chained post-authentication.

Header bit layout (bit 0 is the least significant)::

    bit 0   start-of-PDU flag      -> RTP padding flag
    bit 1   post-auth flag         -> RTP extension flag
    bits 2-4 fragment index        -> low 3 bits of the IP identification
    bit 5   payload type (1 = security, 0 = informational)
                                   -> low bit of the UDP checksum field
"""

from __future__ import annotations

import enum
import hashlib
import struct
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import audio_watermark as aw
from .token_core import TOKEN_BITS, VerifyResult

HEADER_BITS = 6
POST_AUTH_BITS = 64
INFO_MAX_BITS = 128
LENGTH_PREFIX_BITS = 8
MAX_PDUS_PER_WINDOW = 8
DEFAULT_CHAIN_K = 4

FLAG_START = 0b01
FLAG_POST_AUTH = 0b10


class CovertError(ValueError):
    """Malformed or inconsistent covert-channel data."""


class PayloadType(enum.IntEnum):
    INFORMATIONAL = 0
    SECURITY = 1


@dataclass(frozen=True)
class CovertHeader:
    payload_type: PayloadType = PayloadType.INFORMATIONAL
    fragment: int = 0
    flags: int = 0

    def __post_init__(self):
        object.__setattr__(self, "payload_type", PayloadType(self.payload_type))
        if not 0 <= self.fragment < 8:
            raise ValueError(f"fragment index must fit 3 bits: {self.fragment}")
        if not 0 <= self.flags < 4:
            raise ValueError(f"flags must fit 2 bits: {self.flags}")

    @property
    def value(self) -> int:
        return (int(self.payload_type) << 5) | (self.fragment << 2) | self.flags

    @classmethod
    def from_value(cls, v: int) -> "CovertHeader":
        if not 0 <= v < 64:
            raise ValueError(f"header value must fit 6 bits: {v}")
        return cls(PayloadType(v >> 5), (v >> 2) & 0b111, v & 0b11)

    @property
    def start(self) -> bool:
        return bool(self.flags & FLAG_START)

    @property
    def post_auth(self) -> bool:
        return bool(self.flags & FLAG_POST_AUTH)


@dataclass(frozen=True)
class SimPacket:
    seq: int
    timestamp: int
    payload: bytes
    ip_id: int = 0
    udp_checksum: int = 0
    padding: bool = False
    extension: bool = False
    ssrc: int = 0

    _RTP = struct.Struct(">HHBBHII")

    def __post_init__(self):
        for name, bits in (("seq", 16), ("ip_id", 16), ("udp_checksum", 16),
                           ("timestamp", 32), ("ssrc", 32)):
            v = getattr(self, name)
            if not 0 <= v < (1 << bits):
                raise ValueError(f"{name} out of {bits}-bit range: {v}")

    def to_bytes(self) -> bytes:
        """ip id, udp checksum, then a 12-byte RTP header (PT 0 = PCMU) and payload."""
        b0 = 0x80 | (0x20 if self.padding else 0) | (0x10 if self.extension else 0)
        return self._RTP.pack(self.ip_id, self.udp_checksum, b0, 0, self.seq,
                              self.timestamp, self.ssrc) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "SimPacket":
        if len(data) < cls._RTP.size:
            raise CovertError(f"packet too short: {len(data)} bytes")
        ip_id, ck, b0, _pt, seq, ts, ssrc = cls._RTP.unpack_from(data)
        if b0 >> 6 != 2:
            raise CovertError(f"not an RTP version 2 packet (first octet {b0:#04x})")
        return cls(seq, ts, bytes(data[cls._RTP.size:]), ip_id, ck,
                   bool(b0 & 0x20), bool(b0 & 0x10), ssrc)


def pack_header(h: CovertHeader, p: SimPacket) -> SimPacket:
    v = h.value
    return replace(
        p,
        padding=bool(v & 1),
        extension=bool(v & 2),
        ip_id=(p.ip_id & ~0b111 & 0xFFFF) | ((v >> 2) & 0b111),
        udp_checksum=(p.udp_checksum & 0xFFFE) | ((v >> 5) & 1),
    )


def unpack_header(p: SimPacket) -> CovertHeader:
    v = int(p.padding) | (int(p.extension) << 1) | ((p.ip_id & 0b111) << 2) | ((p.udp_checksum & 1) << 5)
    return CovertHeader.from_value(v)


Bits = tuple  # tuple of 0/1 ints


def to_bits(data: bytes) -> Bits:
    return tuple(int(b) for b in np.unpackbits(np.frombuffer(bytes(data), dtype=np.uint8)))


def from_bits(bits: Sequence[int]) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()


@dataclass(frozen=True)
class CovertPdu:
    header: CovertHeader
    payload: Bits = ()

    def __post_init__(self):
        object.__setattr__(self, "payload", tuple(int(b) for b in self.payload))
        if any(b not in (0, 1) for b in self.payload):
            raise ValueError("payload must be a bit sequence")
        expected = payload_length(self.header)
        if expected is None:
            if len(self.payload) > INFO_MAX_BITS:
                raise ValueError(f"informational payload exceeds {INFO_MAX_BITS} bits")
        elif len(self.payload) != expected:
            raise ValueError(f"payload must be {expected} bits for {self.header}")

    @classmethod
    def security(cls, bits: Sequence[int], fragment: int = 0) -> "CovertPdu":
        return cls(CovertHeader(PayloadType.SECURITY, fragment, FLAG_START), tuple(bits))

    @classmethod
    def post_auth(cls, digest: bytes, fragment: int = 0) -> "CovertPdu":
        return cls(CovertHeader(PayloadType.SECURITY, fragment, FLAG_START | FLAG_POST_AUTH),
                   to_bits(digest))

    @classmethod
    def informational(cls, bits: Sequence[int], fragment: int = 0) -> "CovertPdu":
        return cls(CovertHeader(PayloadType.INFORMATIONAL, fragment, FLAG_START), tuple(bits))

    @property
    def is_post_auth(self) -> bool:
        return self.header.post_auth

    def wire_bits(self) -> Bits:
        """Bits as written to the watermark layer."""
        if self.header.payload_type is PayloadType.INFORMATIONAL:
            n = len(self.payload)
            return tuple((n >> (7 - i)) & 1 for i in range(LENGTH_PREFIX_BITS)) + self.payload
        return self.payload

    @property
    def wire_length(self) -> int:
        return len(self.wire_bits())


def payload_length(h: CovertHeader) -> int | None:
    """Fixed payload length implied by the header, None if length-prefixed."""
    if h.payload_type is PayloadType.SECURITY:
        return POST_AUTH_BITS if h.post_auth else TOKEN_BITS
    if h.post_auth:
        raise CovertError("post-auth flag on an informational header")
    return None


def encode_pdus(pdus: Sequence[CovertPdu], window: aw.VoiceWindow, layer: aw.WatermarkLayer,
                packets: Sequence[SimPacket], start: int = 0) -> tuple[aw.VoiceWindow, list[SimPacket]]:
    """Place PDU i's header in packet i and its payload in ``layer`` from ``start`` on.

    Fragment indices are rewritten to the PDU's ordinal within the window;
    packets without a PDU get an all-zero header.
    """
    if len(packets) != aw.WINDOW_FRAMES:
        raise ValueError(f"need one packet per frame ({aw.WINDOW_FRAMES}), got {len(packets)}")
    if len(pdus) > MAX_PDUS_PER_WINDOW:
        raise CovertError(f"at most {MAX_PDUS_PER_WINDOW} PDUs fit in one window")
    bits: list[int] = []
    for pdu in pdus:
        bits.extend(pdu.wire_bits())
    if start + len(bits) > aw.LAYER_CAPACITY:
        raise CovertError(
            f"{len(bits)} payload bits at offset {start} exceed layer capacity {aw.LAYER_CAPACITY}")
    out_packets = []
    for i, p in enumerate(packets):
        h = replace(pdus[i].header, fragment=i) if i < len(pdus) else CovertHeader()
        out_packets.append(pack_header(h, p))
    return aw.embed_bits(window, layer, bits, start=start), out_packets


def pdu_encode(pdu: CovertPdu, window: aw.VoiceWindow, layer: aw.WatermarkLayer,
               packets: Sequence[SimPacket], start: int = 0) -> tuple[aw.VoiceWindow, list[SimPacket]]:
    return encode_pdus([pdu], window, layer, packets, start)


def decode_pdus(window: aw.VoiceWindow, layer: aw.WatermarkLayer,
                packets: Sequence[SimPacket], start: int = 0) -> list[CovertPdu]:
    """Inverse of :func:`encode_pdus`; raises CovertError on inconsistent headers."""
    pdus: list[CovertPdu] = []
    offset = start
    for i, p in enumerate(packets):
        h = unpack_header(p)
        if not h.start:
            if h.value:
                raise CovertError(f"packet {i}: stray header bits {h.value:06b}")
            continue
        if h.fragment != len(pdus):
            raise CovertError(f"packet {i}: fragment {h.fragment}, expected {len(pdus)}")
        n = payload_length(h)
        if n is None:
            prefix = aw.extract_bits(window, layer, LENGTH_PREFIX_BITS, offset)
            n = int("".join(map(str, prefix)), 2)
            offset += LENGTH_PREFIX_BITS
            if n > INFO_MAX_BITS:
                raise CovertError(f"packet {i}: informational length {n} exceeds {INFO_MAX_BITS}")
        if offset + n > aw.LAYER_CAPACITY:
            raise CovertError(f"packet {i}: payload runs past layer capacity")
        payload = tuple(int(b) for b in aw.extract_bits(window, layer, n, offset))
        offset += n
        pdus.append(CovertPdu(h, payload))
    return pdus


def pdu_decode(window, layer, packets, start: int = 0) -> CovertPdu:
    pdus = decode_pdus(window, layer, packets, start)
    if len(pdus) != 1:
        raise CovertError(f"expected one PDU, found {len(pdus)}")
    return pdus[0]


@dataclass
class ParamChain:
    k: int = DEFAULT_CHAIN_K
    payloads: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("chain period k must be at least 2")
        self.payloads = deque((tuple(p) for p in self.payloads), maxlen=self.k - 1)

    def push(self, payload: Sequence[int]) -> None:
        if len(payload) > 255:
            raise ValueError("chained payloads are limited to 255 bits")
        self.payloads.append(tuple(payload))

    @property
    def full(self) -> bool:
        return len(self.payloads) == self.k - 1

    def clear(self) -> None:
        self.payloads.clear()


def chain_digest(chain: ParamChain) -> bytes:
    if not chain.full:
        raise ValueError(f"post-auth digest needs {chain.k - 1} payloads, chain holds {len(chain.payloads)}")
    h = hashlib.sha256()
    for p in chain.payloads:
        h.update(bytes((len(p),)))
        h.update(from_bits(p) if p else b"")
    return h.digest()[:POST_AUTH_BITS // 8]


def chain_verify(chain: ParamChain, received: bytes) -> VerifyResult:
    if chain.full and chain_digest(chain) == bytes(received):
        return VerifyResult.MATCH
    return VerifyResult.MISMATCH


class CovertEncoder:
    """Sender side: every k-th PDU is a post-auth over the previous k-1."""

    def __init__(self, k: int = DEFAULT_CHAIN_K):
        self.chain = ParamChain(k)
        self.sent = 0
        self.post_auth_sent = 0

    def submit(self, pdu: CovertPdu) -> list[CovertPdu]:
        if pdu.is_post_auth:
            raise ValueError("post-auth PDUs are generated by the encoder")
        out = [pdu]
        self.chain.push(pdu.payload)
        self.sent += 1
        if self.chain.full:
            out.append(CovertPdu.post_auth(chain_digest(self.chain)))
            self.chain.clear()
            self.sent += 1
            self.post_auth_sent += 1
        return out

    def submit_all(self, pdus: Iterable[CovertPdu]) -> list[CovertPdu]:
        out = []
        for p in pdus:
            out.extend(self.submit(p))
        return out


class CovertDecoder:
    """Receiver side mirror of :class:`CovertEncoder`.

    ``accept`` returns None for ordinary PDUs and a VerifyResult whenever a
    post-auth check is decided. After :meth:`mark_lost` the chain contents
    are unknown and the next post-auth PDU only resynchronizes.
    """

    def __init__(self, k: int = DEFAULT_CHAIN_K):
        self.chain = ParamChain(k)
        self.tainted = False
        self.received = 0
        self.post_auth_checked = 0

    def mark_lost(self) -> None:
        self.tainted = True

    def accept(self, pdu: CovertPdu) -> VerifyResult | None:
        self.received += 1
        if pdu.is_post_auth:
            if self.tainted:
                self.chain.clear()
                self.tainted = False
                return None
            self.post_auth_checked += 1
            result = chain_verify(self.chain, from_bits(pdu.payload))
            self.chain.clear()
            return result
        if self.chain.full:
            # the post-auth PDU that was due never arrived
            self.chain.clear()
            self.chain.push(pdu.payload)
            if self.tainted:
                return None
            self.post_auth_checked += 1
            return VerifyResult.MISMATCH
        self.chain.push(pdu.payload)
        return None


def trace_line(p: SimPacket) -> str:
    return (f"seq={p.seq:04x} ts={p.timestamp:08x} ipid={p.ip_id:04x} udpck={p.udp_checksum:04x} "
            f"p={int(p.padding)} x={int(p.extension)} len={len(p.payload)} "
            f"covert={unpack_header(p).value:06b}")


def write_trace(packets: Iterable[SimPacket]) -> str:
    return "".join(trace_line(p) + "\n" for p in packets)


def parse_trace(text: str) -> list[dict]:
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rec = dict(kv.split("=", 1) for kv in line.split())
            records.append({
                "seq": int(rec["seq"], 16), "ts": int(rec["ts"], 16),
                "ip_id": int(rec["ipid"], 16), "udp_checksum": int(rec["udpck"], 16),
                "padding": rec["p"] == "1", "extension": rec["x"] == "1",
                "length": int(rec["len"]), "covert": int(rec["covert"], 2),
            })
        except (KeyError, ValueError) as exc:
            raise ValueError(f"trace line {lineno}: {exc}") from exc
    return records
