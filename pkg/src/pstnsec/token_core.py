"""Authentication tokens carried in the gateway and endpoint watermarks.

A token binds the signalling history of the call, the features of one voice
window and the shared parameters (randomizer, timestamp, password, party id)
into a 128-bit value::

    mac = H((sm_digest XOR vf_digest) || ts || pass || id || r)[:8]
    token = r (32) || ts (32) || mac (64)     big-endian
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import struct
from dataclasses import dataclass, field

DIGEST_SIZE = 32
TOKEN_SIZE = 16
TOKEN_BITS = TOKEN_SIZE * 8
MAC_SIZE = 8
PASS_MIN = 8
PASS_MAX = 64

ZERO_DIGEST = bytes(DIGEST_SIZE)

_U32 = 0xFFFFFFFF


class VerifyResult(enum.Enum):
    MATCH = "Match"
    MISMATCH = "Mismatch"

    def __bool__(self) -> bool:
        return self is VerifyResult.MATCH


def hash(data: bytes) -> bytes:  # noqa: A001 - mirrors the H() of the scheme
    return hashlib.sha256(data).digest()


def _check_digest(d: bytes, name: str) -> bytes:
    d = bytes(d)
    if len(d) != DIGEST_SIZE:
        raise ValueError(f"{name} must be {DIGEST_SIZE} bytes, got {len(d)}")
    return d


def _check_u32(v: int, name: str) -> int:
    if not 0 <= v <= _U32:
        raise ValueError(f"{name} out of 32-bit range: {v}")
    return v


@dataclass(frozen=True)
class TokenParams:
    r: int
    ts: int
    id: int
    pass_: bytes = field(repr=False)

    def __post_init__(self):
        _check_u32(self.r, "r")
        _check_u32(self.ts, "ts")
        _check_u32(self.id, "id")
        if not self.pass_:
            raise ValueError("pass must not be empty")
        if not PASS_MIN <= len(self.pass_) <= PASS_MAX:
            raise ValueError(f"pass must be {PASS_MIN}-{PASS_MAX} bytes, got {len(self.pass_)}")


@dataclass(frozen=True)
class Token:
    r: int
    ts: int
    mac: bytes

    def __post_init__(self):
        _check_u32(self.r, "r")
        _check_u32(self.ts, "ts")
        if len(self.mac) != MAC_SIZE:
            raise ValueError(f"mac must be {MAC_SIZE} bytes")

    def to_bytes(self) -> bytes:
        return struct.pack(">II", self.r, self.ts) + self.mac

    @classmethod
    def from_bytes(cls, data: bytes) -> "Token":
        if len(data) != TOKEN_SIZE:
            raise ValueError(f"token must be {TOKEN_SIZE} bytes, got {len(data)}")
        r, ts = struct.unpack(">II", data[:8])
        return cls(r, ts, bytes(data[8:]))


def token_mac(sm_digest: bytes, vf_digest: bytes, ts: int, pass_: bytes, id: int, r: int) -> bytes:
    sm = _check_digest(sm_digest, "sm_digest")
    vf = _check_digest(vf_digest, "vf_digest")
    if not pass_:
        raise ValueError("pass must not be empty")
    mixed = bytes(a ^ b for a, b in zip(sm, vf))
    material = mixed + struct.pack(">I", ts) + pass_ + struct.pack(">I", id) + struct.pack(">I", r)
    return hash(material)[:MAC_SIZE]


def build_token(sm_digest: bytes, vf_digest: bytes, params: TokenParams) -> Token:
    mac = token_mac(sm_digest, vf_digest, params.ts, params.pass_, params.id, params.r)
    return Token(params.r, params.ts, mac)


def verify_token(received: Token, sm_digest: bytes, vf_digest: bytes,
                 pass_: bytes, expected_id: int) -> VerifyResult:
    """Rebuild the token locally with the received R and TS and compare."""
    local = token_mac(sm_digest, vf_digest, received.ts, pass_, expected_id, received.r)
    if hmac.compare_digest(local, received.mac):
        return VerifyResult.MATCH
    return VerifyResult.MISMATCH


@dataclass(frozen=True)
class SignallingHashBuffer:
    """Append-only buffer of (sequence number, digest) pairs.

    ``store`` returns a new buffer, so holding on to an older instance is a
    snapshot that can be restored later.
    """

    entries: tuple[tuple[int, bytes], ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def last_seq(self) -> int | None:
        return self.entries[-1][0] if self.entries else None

    def store(self, n: int, d: bytes) -> "SignallingHashBuffer":
        d = _check_digest(d, "digest")
        if self.entries and n <= self.entries[-1][0]:
            raise ValueError(f"sequence number {n} not above {self.entries[-1][0]}")
        return SignallingHashBuffer(self.entries + ((n, d),))

    def lookup(self, n: int) -> bytes:
        for seq, d in self.entries:
            if seq == n:
                return d
        raise KeyError(n)

    def current(self) -> bytes:
        if not self.entries:
            raise LookupError("signalling hash buffer is empty")
        return self.entries[-1][1]

    def chain_digest(self) -> bytes:
        """Digest over every stored entry in order; what tokens are bound to."""
        if not self.entries:
            raise LookupError("signalling hash buffer is empty")
        h = hashlib.sha256()
        for _, d in self.entries:
            h.update(d)
        return h.digest()


def sb_store(buffer: SignallingHashBuffer, n: int, d: bytes) -> SignallingHashBuffer:
    return buffer.store(n, d)


def sb_current(buffer: SignallingHashBuffer) -> bytes:
    return buffer.current()
