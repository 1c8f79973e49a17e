"""Dual-layer QIM watermarking on 8 kHz PCM voice windows.

Sample indices inside a window are split by residue so that the two
watermark layers and the voice-feature extractor never touch the same
samples::

    i % 4 == 0  -> layer 1 (PSTN endpoint)
    i % 4 == 2  -> layer 2 (media gateway)
    i odd       -> feature samples (VFE)

Because of that split, the feature digest computed by the sender on the
unmarked voice equals the one the receiver computes on marked voice.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import g711
from .token_core import hash

FRAME_SAMPLES = 160
WINDOW_FRAMES = 50
WINDOW_SAMPLES = FRAME_SAMPLES * WINDOW_FRAMES
LAYER_STRIDE = 4
LAYER_CAPACITY = WINDOW_SAMPLES // LAYER_STRIDE

# smallest power of two with zero bit errors through mu-law round trips, both
# on the 60 s synthetic corpus and over every int16 input (calibrate_delta)
DEFAULT_DELTA = 2048

INT16_MIN = -32768
INT16_MAX = 32767


class Layer(enum.IntEnum):
    ENDPOINT = 1
    GATEWAY = 2

    @property
    def offset(self) -> int:
        return 0 if self is Layer.ENDPOINT else 2


@dataclass(frozen=True)
class WatermarkLayer:
    layer: Layer
    delta: int = DEFAULT_DELTA

    def __post_init__(self):
        if not 0 < self.delta <= INT16_MAX:
            raise ValueError(f"delta must be a positive 16-bit value, got {self.delta}")


@dataclass(frozen=True, eq=False)
class VoiceWindow:
    """W frames of 160 int16 samples, stored as a (W, 160) array."""

    samples: np.ndarray
    index: int = 0

    def __post_init__(self):
        a = np.asarray(self.samples)
        if a.ndim == 1:
            if a.size != WINDOW_SAMPLES:
                raise ValueError(f"window needs {WINDOW_SAMPLES} samples, got {a.size}")
            a = a.reshape(WINDOW_FRAMES, FRAME_SAMPLES)
        if a.shape != (WINDOW_FRAMES, FRAME_SAMPLES):
            raise ValueError(f"window shape must be {(WINDOW_FRAMES, FRAME_SAMPLES)}, got {a.shape}")
        if a.dtype != np.int16:
            if np.any(a < INT16_MIN) or np.any(a > INT16_MAX):
                raise ValueError("samples outside the 16-bit range")
            a = a.astype(np.int16)
        a = a.copy()
        a.flags.writeable = False
        object.__setattr__(self, "samples", a)
        if not 0 <= self.index <= 0xFFFFFFFF:
            raise ValueError("window index out of 32-bit range")

    @property
    def flat(self) -> np.ndarray:
        return self.samples.reshape(-1)

    @property
    def frames(self) -> list[np.ndarray]:
        return list(self.samples)

    def replace(self, flat: np.ndarray) -> "VoiceWindow":
        return VoiceWindow(np.asarray(flat).reshape(WINDOW_FRAMES, FRAME_SAMPLES), self.index)

    def __eq__(self, other):
        if not isinstance(other, VoiceWindow):
            return NotImplemented
        return self.index == other.index and np.array_equal(self.samples, other.samples)

    __hash__ = None

    @classmethod
    def silence(cls, index: int = 0) -> "VoiceWindow":
        return cls(np.zeros((WINDOW_FRAMES, FRAME_SAMPLES), dtype=np.int16), index)


def layer_positions(layer: WatermarkLayer | Layer, window: VoiceWindow | None = None) -> np.ndarray:
    """Ascending window-global sample indices carrying ``layer``'s bits."""
    lay = layer.layer if isinstance(layer, WatermarkLayer) else Layer(layer)
    return np.arange(lay.offset, WINDOW_SAMPLES, LAYER_STRIDE)


def feature_positions() -> np.ndarray:
    return np.arange(1, WINDOW_SAMPLES, 2)


def pad_bits(start: int, count: int) -> np.ndarray:
    return (np.arange(start, start + count) % 2).astype(np.uint8)


def qim_quantize(x, bits, delta: int) -> np.ndarray:
    """Move each sample to the nearest point of lattice 2k*delta + b*delta, clamped to int16."""
    x = np.asarray(x, dtype=np.int64)
    b = np.asarray(bits, dtype=np.int64)
    step = 2 * delta
    q = np.floor((x - b * delta) / step + 0.5).astype(np.int64) * step + b * delta
    return np.clip(q, INT16_MIN, INT16_MAX)


def qim_decode(x, delta: int) -> np.ndarray:
    """Nearest-lattice classification; ties go to the even lattice."""
    x = np.asarray(x, dtype=np.int64)
    step = 2 * delta
    d0 = np.abs(x - np.floor(x / step + 0.5) * step)
    d1 = np.abs(x - (np.floor((x - delta) / step + 0.5) * step + delta))
    return (d1 < d0).astype(np.uint8)


def embed_bits(window: VoiceWindow, layer: WatermarkLayer, bits, start: int = 0) -> VoiceWindow:
    """Embed ``bits`` at the layer's positions ``start..`` and pad the rest.

    Positions before ``start`` keep whatever they already carry, which lets
    several payloads share one layer within a window.
    """
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    if start < 0 or start + bits.size > LAYER_CAPACITY:
        raise ValueError(
            f"{bits.size} bits at offset {start} exceed layer capacity {LAYER_CAPACITY}")
    if np.any(bits > 1):
        raise ValueError("bits must be 0 or 1")
    pos = layer_positions(layer)[start:]
    payload = np.concatenate([bits, pad_bits(start + bits.size, LAYER_CAPACITY - start - bits.size)])
    out = window.flat.astype(np.int64)
    out[pos] = qim_quantize(out[pos], payload, layer.delta)
    return window.replace(out.astype(np.int16))


def extract_bits(window: VoiceWindow, layer: WatermarkLayer, nbits: int, start: int = 0) -> np.ndarray:
    if nbits < 0 or start < 0 or start + nbits > LAYER_CAPACITY:
        raise ValueError(f"cannot extract {nbits} bits at offset {start}")
    pos = layer_positions(layer)[start:start + nbits]
    return qim_decode(window.flat[pos], layer.delta)


def frame_features(frame: np.ndarray) -> bytes:
    """Log-energy bucket and zero-crossing count over the odd samples."""
    odd = np.asarray(frame, dtype=np.float64)[1::2]
    energy = float(np.mean(odd * odd))
    bucket = min(255, int(math.floor(8.0 * math.log2(1.0 + energy))))
    signs = odd >= 0
    zc = int(np.count_nonzero(signs[1:] != signs[:-1]))
    return bytes((bucket, zc))


@dataclass(frozen=True)
class VoiceFeature:
    digest: bytes
    raw: bytes


def voice_feature(window: VoiceWindow) -> VoiceFeature:
    raw = b"".join(frame_features(f) for f in window.samples)
    return VoiceFeature(hash(raw), raw)


def adda_roundtrip(window: VoiceWindow) -> VoiceWindow:
    return window.replace(g711.roundtrip(window.flat))


def bit_errors(a, b) -> int:
    return int(np.count_nonzero(np.asarray(a, dtype=np.uint8) != np.asarray(b, dtype=np.uint8)))


def worst_case_errors(delta: int, passes: int = 1) -> int:
    """Bit errors over every int16 input and both bit values after ``passes`` mu-law trips."""
    x = np.arange(INT16_MIN, INT16_MAX + 1, dtype=np.int64)
    errors = 0
    for b in (0, 1):
        q = qim_quantize(x, np.full(x.size, b), delta)
        for _ in range(passes):
            q = g711.roundtrip(q)
        errors += int(np.count_nonzero(qim_decode(q, delta) != b))
    return errors


def corpus_errors(signal, delta: int, seed: int = 0, passes: int = 2) -> int:
    """Bit errors of both layers over every full window of ``signal``.

    Each window is digitized, marked with random full-capacity payloads on
    both layers (the endpoint layer followed by a mu-law trip, as at a PSTN
    endpoint) and pushed through ``passes - 1`` further mu-law trips.
    """
    signal = np.asarray(signal, dtype=np.int16).reshape(-1)
    nwin = signal.size // WINDOW_SAMPLES
    if nwin == 0:
        raise ValueError("calibration signal shorter than one window")
    rng = np.random.default_rng(seed)
    errors = 0
    for k in range(nwin):
        w = adda_roundtrip(VoiceWindow(signal[k * WINDOW_SAMPLES:(k + 1) * WINDOW_SAMPLES], k))
        payloads = {}
        for lay in Layer:
            payloads[lay] = rng.integers(0, 2, LAYER_CAPACITY, dtype=np.uint8)
            w = embed_bits(w, WatermarkLayer(lay, delta), payloads[lay])
            if lay is Layer.ENDPOINT:
                w = adda_roundtrip(w)
        for _ in range(passes - 1):
            w = adda_roundtrip(w)
        for lay in Layer:
            got = extract_bits(w, WatermarkLayer(lay, delta), LAYER_CAPACITY)
            errors += bit_errors(got, payloads[lay])
    return errors


def calibrate_delta(signal, candidates=(64, 128, 256, 512, 1024, 2048, 4096), seed: int = 0,
                    passes: int = 2, worst_case: bool = True) -> tuple[int | None, dict[int, int]]:
    """Return the smallest candidate step with zero bit errors, plus the sweep.

    With ``worst_case`` a candidate must also survive the exhaustive int16
    sweep, so the chosen step holds for any input level, not only the
    corpus. ``chosen`` is None when no candidate qualifies.
    """
    results: dict[int, int] = {}
    chosen = None
    for delta in sorted(candidates):
        errors = corpus_errors(signal, delta, seed, passes)
        if worst_case:
            errors += worst_case_errors(delta)
        results[delta] = errors
        if errors == 0 and chosen is None:
            chosen = delta
    return chosen, results
