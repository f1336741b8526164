"""Seeded synthetic clean-guitar material: plucked notes, strummed chords, slides."""

from __future__ import annotations

import numpy as np
from scipy import signal

SAMPLE_RATE = 44100

_CHORD_SHAPES = ((0, 7, 12), (0, 4, 7, 12), (0, 3, 7, 12), (0, 7, 12, 16), (0, 5, 7))


def midi_to_hz(m: float) -> float:
    return 440.0 * 2.0 ** ((m - 69.0) / 12.0)


def karplus_strong(freq: float, duration: float, rng: np.random.Generator,
                   velocity: float = 0.8, brightness: float = 0.6,
                   decay: float = 0.996, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Plucked string via the Karplus-Strong recursion.

    ``y[n] = decay/2 * (y[n-N] + y[n-N-1])`` evaluated one period at a time,
    with a low-passed noise burst as the initial excitation.
    """
    period = max(int(round(sr / freq)), 2)
    total = max(int(duration * sr), period)
    burst = rng.uniform(-1.0, 1.0, period)
    # brighter plucks keep more of the noise burst's top end
    b, a = signal.butter(1, 500.0 + 9000.0 * brightness, fs=sr)
    burst = signal.lfilter(b, a, burst)
    burst *= velocity / (np.abs(burst).max() + 1e-12)

    out = np.zeros(total + 1)
    out[1: period + 1] = burst
    c = 0.5 * decay
    for start in range(period + 1, total + 1, period):
        stop = min(start + period, total + 1)
        n = stop - start
        out[start:stop] = c * (out[start - period: start - period + n] +
                               out[start - period - 1: start - period - 1 + n])
    y = out[1:]
    fade = min(len(y), int(0.01 * sr))
    y[-fade:] *= np.linspace(1.0, 0.0, fade)
    return y


def slide(freq_from: float, freq_to: float, duration: float, rng: np.random.Generator,
          velocity: float = 0.8, sr: int = SAMPLE_RATE) -> np.ndarray:
    """A plucked note whose pitch glides exponentially between two frequencies."""
    base = karplus_strong(freq_from, duration * 2.5, rng, velocity=velocity, sr=sr)
    n = int(duration * sr)
    hold = int(0.25 * n)
    ratio = np.ones(n)
    ratio[hold:] = (freq_to / freq_from) ** np.linspace(0.0, 1.0, n - hold) ** 0.7
    read_pos = np.cumsum(ratio) - ratio[0]
    read_pos = read_pos[read_pos < len(base) - 1]
    return np.interp(read_pos, np.arange(len(base)), base)


def clean_guitar(duration_s: float, seed: int, sr: int = SAMPLE_RATE) -> np.ndarray:
    """A continuous clean-guitar performance of ``duration_s`` seconds."""
    rng = np.random.default_rng(seed)
    total = int(duration_s * sr)
    out = np.zeros(total + 3 * sr)
    t = 0.0
    while t < duration_s:
        kind = rng.choice(3, p=[0.55, 0.3, 0.15])
        dur = float(rng.uniform(0.25, 1.5))
        vel = float(rng.uniform(0.3, 1.0))
        root = float(rng.integers(40, 72))
        start = int(t * sr)
        if kind == 0:
            note = karplus_strong(midi_to_hz(root), dur + 0.5, rng, velocity=vel,
                                  brightness=float(rng.uniform(0.2, 1.0)),
                                  decay=float(rng.uniform(0.990, 0.998)), sr=sr)
            parts = [(start, note)]
        elif kind == 1:
            shape = _CHORD_SHAPES[rng.integers(len(_CHORD_SHAPES))]
            strum = float(rng.uniform(0.008, 0.03))
            parts = []
            for i, interval in enumerate(shape):
                s = karplus_strong(midi_to_hz(root + interval), dur + 0.8, rng,
                                   velocity=vel * 0.7, brightness=float(rng.uniform(0.2, 0.9)),
                                   decay=float(rng.uniform(0.993, 0.998)), sr=sr)
                parts.append((start + int(i * strum * sr), s))
        else:
            target = root + float(rng.choice([-5, -3, -2, 2, 3, 5, 7]))
            parts = [(start, slide(midi_to_hz(root), midi_to_hz(target), dur + 0.3, rng,
                                   velocity=vel, sr=sr))]
        for s0, seg in parts:
            seg = seg[: len(out) - s0]
            out[s0: s0 + len(seg)] += seg
        t += dur * float(rng.uniform(0.5, 1.0))
    out = out[:total]
    peak = np.abs(out).max()
    return (out / peak).astype(np.float32) if peak > 0 else out.astype(np.float32)
