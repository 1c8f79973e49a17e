"""Seeded speech-like test signal.

Voiced segments are a handful of harmonics over a drifting pitch, shaped
by a syllable-rate envelope; unvoiced segments are short noise bursts; the
rest is low-level background noise with pauses in between.
"""

from __future__ import annotations

import numpy as np

SAMPLE_RATE = 8000


def synthetic_speech(seconds: float, seed: int = 0, peak: int = 16000) -> np.ndarray:
    rng = np.random.default_rng(seed)
    n = int(round(seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    out = np.zeros(n)

    # pitch: slow random walk between 90 and 260 Hz
    knots = max(2, int(seconds * 4) + 2)
    f0_knots = rng.uniform(90.0, 260.0, knots)
    f0 = np.interp(t, np.linspace(0.0, t[-1] if n > 1 else 1.0, knots), f0_knots)
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    voiced = np.zeros(n)
    for h in range(1, 9):
        formant_gain = np.exp(-((h * 170.0 - rng.uniform(400, 900)) / 700.0) ** 2) + 0.15
        voiced += formant_gain / h * np.sin(h * phase + rng.uniform(0, 2 * np.pi))

    # syllable envelope with pauses
    pos = 0
    env = np.zeros(n)
    kind = np.zeros(n, dtype=np.int8)  # 0 pause, 1 voiced, 2 unvoiced
    while pos < n:
        dur = int(rng.uniform(0.08, 0.35) * SAMPLE_RATE)
        roll = rng.random()
        k = 0 if roll < 0.2 else (2 if roll < 0.35 else 1)
        end = min(n, pos + dur)
        seg = np.hanning(max(end - pos, 2))[: end - pos]
        env[pos:end] = seg * rng.uniform(0.3, 1.0)
        kind[pos:end] = k
        pos = end

    noise = rng.standard_normal(n)
    out = np.where(kind == 1, voiced * env, 0.0)
    out += np.where(kind == 2, 0.6 * noise * env, 0.0)
    out += 0.004 * noise
    scale = peak / max(np.max(np.abs(out)), 1e-9)
    return np.clip(np.round(out * scale), -32768, 32767).astype(np.int16)
