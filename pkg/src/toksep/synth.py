"""Synthetic four-stem clips with exact ground truth.

vocals: vibrato harmonic stack; drums: decaying noise bursts on a beat grid;
bass: low sine with glides; other: chirps over a detuned pad.
The mixture is the float32 sample-wise sum of the four stems.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import TRACKS
from .dsp import AudioBuffer
from .errors import ValidationError
from .seeding import numpy_rng

PEAK_RANGE = (0.08, 0.22)


@dataclass(frozen=True)
class ToySourceSpec:
    seed: int = 0
    clip_id: int = 0
    vocals: str = "vibrato-harmonic"
    drums: str = "noise-bursts"
    bass: str = "gliding-sine"
    other: str = "chirp-pad"


def _notes(rng, dur, lo, hi, min_len, max_len):
    """Piecewise-constant pitch track: list of (start_s, end_s, hz)."""
    t, out = 0.0, []
    while t < dur:
        length = rng.uniform(min_len, max_len)
        out.append((t, min(dur, t + length), float(np.exp(rng.uniform(np.log(lo), np.log(hi))))))
        t += length
    return out


def _pitch_curve(notes, n, sr, glide_s=0.0):
    f = np.empty(n)
    for start, end, hz in notes:
        f[int(start * sr) : int(end * sr)] = hz
    f[int(notes[-1][1] * sr) :] = notes[-1][2]
    if glide_s > 0:
        k = max(1, int(glide_s * sr))
        kernel = np.ones(k) / k
        f = np.convolve(np.pad(f, (k - 1, 0), mode="edge"), kernel, mode="valid")
    return f


def _envelope(notes, n, sr, attack=0.02, release=0.05, gap_p=0.0, rng=None):
    env = np.zeros(n)
    gaps = [rng is not None and rng.random() < gap_p for _ in notes]
    if all(gaps):
        gaps[0] = False  # never a fully silent source
    for (start, end, _), gap in zip(notes, gaps):
        if gap:
            continue
        a, b = int(start * sr), int(end * sr)
        seg = np.ones(b - a)
        na, nr = min(len(seg), int(attack * sr)), min(len(seg), int(release * sr))
        if na:
            seg[:na] = np.linspace(0, 1, na)
        if nr:
            seg[-nr:] *= np.linspace(1, 0, nr)
        env[a:b] = seg
    return env


def _vocals(rng, n, sr):
    dur = n / sr
    notes = _notes(rng, dur, 180.0, 520.0, 0.3, 0.9)
    f0 = _pitch_curve(notes, n, sr, glide_s=0.03)
    t = np.arange(n) / sr
    vib = 1 + rng.uniform(0.01, 0.025) * np.sin(2 * np.pi * rng.uniform(4.5, 6.5) * t)
    phase = 2 * np.pi * np.cumsum(f0 * vib) / sr
    tilt = rng.uniform(0.6, 1.2)
    x = sum(np.sin(h * phase) / h**tilt for h in range(1, 9) if h * f0.max() < 0.45 * sr)
    return x * _envelope(notes, n, sr, 0.04, 0.08, gap_p=0.2, rng=rng)


def _drums(rng, n, sr):
    bpm = rng.uniform(95, 145)
    step = 60.0 / bpm / 2
    x = np.zeros(n)
    offset = rng.uniform(0, step)
    t = offset
    while t < n / sr:
        if rng.random() < 0.8:
            a = int(t * sr)
            length = min(n - a, int(rng.uniform(0.08, 0.25) * sr))
            decay = rng.uniform(15, 45)
            burst = rng.standard_normal(length) * np.exp(-decay * np.arange(length) / sr)
            if rng.random() < 0.5:
                burst = np.diff(burst, prepend=0.0)  # brighter, hi-hat-like
            x[a : a + length] += burst * rng.uniform(0.5, 1.0)
        t += step
    return x


def _bass(rng, n, sr):
    notes = _notes(rng, n / sr, 41.0, 110.0, 0.25, 0.7)
    f = _pitch_curve(notes, n, sr, glide_s=rng.uniform(0.03, 0.1))
    phase = 2 * np.pi * np.cumsum(f) / sr
    x = np.sin(phase) + 0.15 * np.sin(2 * phase)
    return x * _envelope(notes, n, sr, 0.01, 0.04)


def _other(rng, n, sr):
    t = np.arange(n) / sr
    root = np.exp(rng.uniform(np.log(600.0), np.log(1400.0)))
    pad = sum(np.sin(2 * np.pi * root * r * (1 + rng.uniform(-0.004, 0.004)) * t + rng.uniform(0, 2 * np.pi)) for r in (1.0, 1.25, 1.5, 2.0))
    pad *= 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t + rng.uniform(0, 2 * np.pi)) ** 2
    chirps = np.zeros(n)
    for _ in range(rng.integers(1, 4)):
        a = rng.integers(0, max(1, n - sr // 4))
        length = min(n - a, int(rng.uniform(0.2, 0.6) * sr))
        f_start, f_end = np.exp(rng.uniform(np.log(1500), np.log(6000), 2))
        f = np.geomspace(f_start, f_end, length)
        seg = np.sin(2 * np.pi * np.cumsum(f) / sr) * np.hanning(length)
        chirps[a : a + length] += seg
    return pad + 0.8 * chirps


_GENERATORS = {"vocals": _vocals, "drums": _drums, "bass": _bass, "other": _other}


def synthesize_clip(
    spec: ToySourceSpec | int, duration_s: float = 4.0, sample_rate_hz: int = 48000, min_duration_s: float = 0.08
) -> tuple[AudioBuffer, list[AudioBuffer]]:
    if isinstance(spec, int):
        spec = ToySourceSpec(clip_id=spec)
    if not duration_s >= min_duration_s:
        raise ValidationError("duration must be at least one codec hop")
    n = int(round(duration_s * sample_rate_hz))
    stems = []
    for name in TRACKS:
        rng = numpy_rng(spec.seed, "synth", spec.clip_id, name)
        x = _GENERATORS[name](rng, n, sample_rate_hz)
        peak = np.max(np.abs(x))
        if peak > 0:
            x = x * (rng.uniform(*PEAK_RANGE) / peak)
        stems.append(x.astype(np.float32))
    mixture = stems[0] + stems[1] + stems[2] + stems[3]
    return AudioBuffer(mixture, sample_rate_hz), [AudioBuffer(s, sample_rate_hz) for s in stems]


def make_dataset(n_clips: int, duration_s: float = 4.0, sample_rate_hz: int = 48000, seed: int = 0, first_id: int = 0):
    """List of ``(mixture, stems)`` pairs for clip ids ``first_id .. first_id + n_clips - 1``."""
    return [synthesize_clip(ToySourceSpec(seed=seed, clip_id=first_id + i), duration_s, sample_rate_hz) for i in range(n_clips)]
