"""Deterministic signal processing: WAV I/O, STFT, log-Mel, resampling.

Everything here is numpy/float64 and side-effect free. The torch versions
used inside training losses (:func:`torch_log_mel`) share the same filter
bank matrix so both paths agree.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import gcd

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import ValidationError

MEL_FLOOR = 1e-5


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise ValidationError("audio must be mono (1-D samples)")
        if self.sample_rate_hz <= 0:
            raise ValidationError("sample_rate_hz must be positive")
        if not np.all(np.isfinite(samples)):
            raise ValidationError("invalid sample")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class Spectrogram:
    magnitudes: np.ndarray  # frames x bins
    fft_size: int
    hop: int

    @property
    def frames(self) -> int:
        return self.magnitudes.shape[0]


@dataclass(frozen=True)
class MelFeatures:
    values: np.ndarray  # frames x n_mels
    n_mels: int
    frame_rate_hz: float


def _window(kind: str, size: int) -> np.ndarray:
    if kind == "hann":
        # periodic Hann, the usual choice for overlap-add analysis
        return scipy.signal.get_window("hann", size, fftbins=True)
    if kind in ("rect", "boxcar", "rectangular"):
        return np.ones(size)
    raise ValidationError(f"unknown window {kind!r}")


def frame_signal(x: np.ndarray, fft_size: int, hop: int, center: bool = True) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if center:
        x = np.pad(x, (fft_size // 2, fft_size // 2), mode="reflect")
    if len(x) < fft_size:
        x = np.pad(x, (0, fft_size - len(x)))
    n_frames = 1 + (len(x) - fft_size) // hop
    return np.lib.stride_tricks.sliding_window_view(x, fft_size)[::hop][:n_frames]


def stft(
    audio: AudioBuffer,
    fft_size: int = 2048,
    hop: int = 960,
    window: str = "hann",
    center: bool = True,
) -> Spectrogram:
    if fft_size <= 0 or fft_size & (fft_size - 1):
        raise ValidationError("fft_size must be a power of two")
    if not 0 < hop <= fft_size:
        raise ValidationError("hop must satisfy 0 < hop <= fft_size")
    x = np.asarray(audio.samples, dtype=np.float64)
    if x.size == 0:
        raise ValidationError("empty input")
    if not np.all(np.isfinite(x)):
        raise ValidationError("invalid sample")
    frames = frame_signal(x, fft_size, hop, center) * _window(window, fft_size)
    mags = np.abs(np.fft.rfft(frames, axis=-1))
    return Spectrogram(mags, fft_size, hop)


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = f / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-12) / min_log_hz) / logstep, mels)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


@lru_cache(maxsize=16)
def _mel_filterbank_cached(n_mels: int, fft_size: int, sample_rate_hz: int) -> np.ndarray:
    n_bins = fft_size // 2 + 1
    fft_freqs = np.linspace(0.0, sample_rate_hz / 2, n_bins)
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate_hz / 2), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    fdiff = np.diff(hz_pts)
    ramps = hz_pts[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    # area normalisation: each triangle integrates to the same value in Hz
    weights *= (2.0 / (hz_pts[2:] - hz_pts[:-2]))[:, None]
    weights.setflags(write=False)
    return weights


def mel_filterbank(n_mels: int, fft_size: int, sample_rate_hz: int) -> np.ndarray:
    """Triangular, area-normalised filters spanning 0 Hz to Nyquist, shape (n_mels, bins)."""
    if n_mels < 1:
        raise ValidationError("n_mels must be >= 1")
    if n_mels > fft_size // 2 + 1:
        raise ValidationError("filter bank overdetermined")
    return _mel_filterbank_cached(n_mels, fft_size, sample_rate_hz)


def log_mel(spec: Spectrogram, n_mels: int = 120, sample_rate_hz: int = 48000) -> MelFeatures:
    bins = spec.magnitudes.shape[1]
    if n_mels > bins:
        raise ValidationError("filter bank overdetermined")
    fb = mel_filterbank(n_mels, spec.fft_size, sample_rate_hz)
    power = spec.magnitudes**2
    values = np.log(power @ fb.T + MEL_FLOOR)
    return MelFeatures(values, n_mels, sample_rate_hz / spec.hop)


def mel_features(
    audio: AudioBuffer, n_mels: int = 120, fft_size: int = 2048, hop: int = 960
) -> MelFeatures:
    return log_mel(stft(audio, fft_size, hop), n_mels, audio.sample_rate_hz)


def mel_l1(a: AudioBuffer, b: AudioBuffer, n_mels: int = 120, fft_size: int = 2048, hop: int = 960) -> float:
    """Mean absolute log-Mel difference; the longer signal is trimmed."""
    if a.sample_rate_hz != b.sample_rate_hz:
        raise ValidationError("sample-rate mismatch")
    n = min(len(a), len(b))
    ma = mel_features(AudioBuffer(a.samples[:n], a.sample_rate_hz), n_mels, fft_size, hop).values
    mb = mel_features(AudioBuffer(b.samples[:n], b.sample_rate_hz), n_mels, fft_size, hop).values
    return float(np.mean(np.abs(ma - mb)))


def si_snr(estimate: np.ndarray, reference: np.ndarray, cap_db: float = 60.0) -> float:
    n = min(len(estimate), len(reference))
    est = np.asarray(estimate[:n], dtype=np.float64)
    ref = np.asarray(reference[:n], dtype=np.float64)
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = np.dot(ref, ref)
    if ref_energy == 0.0:
        return -cap_db if np.dot(est, est) > 0 else cap_db
    target = np.dot(est, ref) / ref_energy * ref
    noise = est - target
    t, e = np.dot(target, target), np.dot(noise, noise)
    if e <= t * 10 ** (-cap_db / 10):
        return cap_db
    if t == 0.0:
        return -cap_db
    return float(max(-cap_db, min(cap_db, 10 * np.log10(t / e))))


def spectral_centroid(audio: AudioBuffer, fft_size: int = 2048, hop: int = 960) -> float:
    mags = stft(audio, fft_size, hop).magnitudes
    freqs = np.linspace(0.0, audio.sample_rate_hz / 2, mags.shape[1])
    power = (mags**2).sum(axis=0)
    return float((power * freqs).sum() / max(power.sum(), 1e-20))


def resample(audio: AudioBuffer, target_rate_hz: int) -> AudioBuffer:
    """Windowed-sinc polyphase resampling with a fixed Kaiser design."""
    if target_rate_hz == audio.sample_rate_hz:
        return audio
    g = gcd(target_rate_hz, audio.sample_rate_hz)
    up, down = target_rate_hz // g, audio.sample_rate_hz // g
    y = scipy.signal.resample_poly(
        np.asarray(audio.samples, dtype=np.float64), up, down, window=("kaiser", 5.0)
    )
    return AudioBuffer(y.astype(audio.samples.dtype if audio.samples.dtype.kind == "f" else np.float32), target_rate_hz)


def read_wav(path) -> AudioBuffer:
    try:
        rate, data = scipy.io.wavfile.read(path)
    except ValueError as exc:
        raise ValidationError(f"unsupported format: {exc}") from exc
    if data.dtype == np.int16:
        x = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        x = data
    else:
        raise ValidationError(f"unsupported format: {data.dtype}")
    if x.ndim == 2:
        # average downmix, computed in float64 then cast back
        x = x.astype(np.float64).mean(axis=1).astype(np.float32)
    return AudioBuffer(np.ascontiguousarray(x), int(rate))


def write_wav(path, audio: AudioBuffer, pcm16: bool = False) -> None:
    x = np.asarray(audio.samples)
    if pcm16:
        data = np.clip(np.round(x.astype(np.float64) * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = x.astype(np.float32)
    scipy.io.wavfile.write(path, audio.sample_rate_hz, data)


def torch_log_mel(wave, sample_rate_hz: int, n_mels: int = 120, fft_size: int = 2048, hop: int = 960):
    """Differentiable log-Mel of a (batch, samples) tensor, same filter bank as :func:`log_mel`."""
    import torch

    fb = torch.tensor(np.array(mel_filterbank(n_mels, fft_size, sample_rate_hz)), dtype=wave.dtype)
    window = torch.hann_window(fft_size, periodic=True, dtype=wave.dtype)
    spec = torch.stft(wave, fft_size, hop, window=window, center=True, pad_mode="reflect", return_complex=True)
    power = spec.real**2 + spec.imag**2  # (batch, bins, frames)
    return torch.log(torch.einsum("mb,nbt->ntm", fb, power) + MEL_FLOOR)
