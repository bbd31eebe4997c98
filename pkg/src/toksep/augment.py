"""Online augmentation: per-track loudness scaling, polarity inversion and a
seven-band peaking equalizer. The mixture is always rebuilt as the sum of the
augmented tracks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.signal

from .dsp import AudioBuffer

GAIN_RANGE = (0.5, 1.5)
POLARITY_P = 0.1
EQ_CENTERS_HZ = tuple(float(f) for f in np.geomspace(63.0, 16000.0, 7))
EQ_GAIN_DB = 6.0
EQ_Q = 1.0


@dataclass(frozen=True)
class TrackAugmentation:
    gain: float
    flip: bool
    eq_gains_db: tuple[float, ...]


def apply_gain(x: np.ndarray, gain: float) -> np.ndarray:
    return x * gain


def apply_polarity(x: np.ndarray, flip: bool) -> np.ndarray:
    return -x if flip else x


def peaking_sos(center_hz: float, gain_db: float, q: float, sample_rate_hz: int) -> np.ndarray:
    """RBJ-cookbook peaking biquad as one normalised second-order section."""
    a = 10 ** (gain_db / 40)
    w0 = 2 * np.pi * min(center_hz, 0.49 * sample_rate_hz) / sample_rate_hz
    alpha = np.sin(w0) / (2 * q)
    cw = np.cos(w0)
    b = np.array([1 + alpha * a, -2 * cw, 1 - alpha * a])
    den = np.array([1 + alpha / a, -2 * cw, 1 - alpha / a])
    return np.concatenate([b / den[0], den / den[0]])[None]


def eq_sos(gains_db, sample_rate_hz: int, centers=EQ_CENTERS_HZ, q: float = EQ_Q) -> np.ndarray:
    return np.concatenate([peaking_sos(f, g, q, sample_rate_hz) for f, g in zip(centers, gains_db)])


def apply_eq(x: np.ndarray, gains_db, sample_rate_hz: int) -> np.ndarray:
    y = scipy.signal.sosfilt(eq_sos(gains_db, sample_rate_hz), np.asarray(x, dtype=np.float64))
    return y.astype(np.asarray(x).dtype)


def draw_augmentation(rng: np.random.Generator) -> TrackAugmentation:
    return TrackAugmentation(
        gain=float(rng.uniform(*GAIN_RANGE)),
        flip=bool(rng.random() < POLARITY_P),
        eq_gains_db=tuple(float(g) for g in rng.uniform(-EQ_GAIN_DB, EQ_GAIN_DB, len(EQ_CENTERS_HZ))),
    )


def augment_track(audio: AudioBuffer, aug: TrackAugmentation) -> AudioBuffer:
    x = apply_gain(np.asarray(audio.samples), aug.gain)
    x = apply_polarity(x, aug.flip)
    x = apply_eq(x, aug.eq_gains_db, audio.sample_rate_hz)
    return AudioBuffer(x.astype(np.float32), audio.sample_rate_hz)


def augment(tracks, rng: np.random.Generator) -> tuple[AudioBuffer, list[AudioBuffer], list[TrackAugmentation]]:
    """Augment each track independently; returns (mixture, tracks, drawn parameters)."""
    params = [draw_augmentation(rng) for _ in tracks]
    out = [augment_track(t, p) for t, p in zip(tracks, params)]
    mix = out[0].samples.copy()
    for t in out[1:]:
        mix = mix + t.samples
    return AudioBuffer(mix, tracks[0].sample_rate_hz), out, params
