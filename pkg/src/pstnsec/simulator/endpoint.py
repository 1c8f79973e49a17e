"""Watermark-capable PSTN endpoints (digital mode: digitize, mark, reconvert)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .. import audio_watermark as aw
from ..token_core import (TOKEN_BITS, ZERO_DIGEST, Token, TokenParams, VerifyResult, build_token,
                          verify_token)


@dataclass
class PstnEndpoint:
    id: int
    pass_: bytes = field(repr=False)
    peer_id: int | None = None
    delta: int = aw.DEFAULT_DELTA
    ts_base: int = 0
    rng: Callable[[], int] | None = None
    windows: int = 0

    def __post_init__(self):
        if self.rng is None:
            gen = np.random.default_rng()
            self.rng = lambda: int(gen.integers(0, 1 << 32))

    @property
    def layer(self) -> aw.WatermarkLayer:
        return aw.WatermarkLayer(aw.Layer.ENDPOINT, self.delta)

    def next_ts(self) -> int:
        self.windows += 1
        return (self.ts_base + self.windows) & 0xFFFFFFFF


def endpoint_token(e: PstnEndpoint, digitized: aw.VoiceWindow, ts: int) -> Token:
    vf = aw.voice_feature(digitized)
    return build_token(ZERO_DIGEST, vf.digest, TokenParams(e.rng() & 0xFFFFFFFF, ts, e.id, e.pass_))


def endpoint_send(e: PstnEndpoint, w: aw.VoiceWindow) -> aw.VoiceWindow:
    """Digitize, embed the endpoint token in layer 1, reconvert to analog and back."""
    digitized = aw.adda_roundtrip(w)
    token = endpoint_token(e, digitized, e.next_ts())
    bits = np.unpackbits(np.frombuffer(token.to_bytes(), dtype=np.uint8))
    return aw.adda_roundtrip(aw.embed_bits(digitized, e.layer, bits))


def extract_token(w: aw.VoiceWindow, layer: aw.WatermarkLayer) -> Token:
    bits = aw.extract_bits(w, layer, TOKEN_BITS)
    return Token.from_bytes(np.packbits(bits).tobytes())


def endpoint_verify(e: PstnEndpoint, w: aw.VoiceWindow) -> VerifyResult:
    """Check the caller's layer-1 token; layer-2 content is never read."""
    expected_ts = e.next_ts()
    token = extract_token(w, e.layer)
    peer = e.peer_id if e.peer_id is not None else e.id
    if token.ts != expected_ts:
        return VerifyResult.MISMATCH
    return verify_token(token, ZERO_DIGEST, aw.voice_feature(w).digest, e.pass_, peer)
