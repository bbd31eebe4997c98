"""Separation engine: mixture prefix, four tracks generated in fixed order
with one preserved KV cache, de-interleaving, codec decoding, metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import TRACKS
from .codec import CodecModel
from .config import GenerationConfig
from .dsp import AudioBuffer, mel_l1, si_snr
from .errors import CacheInvalid, ValidationError
from .lm import KvCache, SeparationLM
from .model import Separator
from .seeding import torch_generator
from .seqlayout import SPECIAL, SpecialToken, TrackSequence, deinterleave, split_tracks

SI_SNR_CAP_DB = 60.0


def allowed_mask(vocab: int, codebook_size: int, allow_end: bool) -> torch.Tensor:
    m = torch.zeros(vocab, dtype=torch.bool)
    m[:codebook_size] = True
    if allow_end:
        m[SpecialToken.END.index(codebook_size)] = True
    return m


def select_tokens(logits: torch.Tensor, allowed: torch.Tensor, gen: GenerationConfig, generator=None) -> torch.Tensor:
    """Per-head choice over (B, R, V) logits with disallowed entries at -inf."""
    masked = logits.masked_fill(~allowed, float("-inf"))
    if gen.mode == "greedy":
        return masked.argmax(-1)
    scaled = masked / gen.temperature
    if gen.top_k:
        kth = scaled.topk(min(gen.top_k, int(allowed.sum())), -1).values[..., -1:]
        scaled = scaled.masked_fill(scaled < kth, float("-inf"))
    probs = scaled.softmax(-1)
    flat = torch.multinomial(probs.reshape(-1, probs.shape[-1]), 1, generator=generator)
    return flat.reshape(probs.shape[:-1])


def generate_track(
    lm: SeparationLM,
    cache: KvCache,
    steps: int,
    gen: GenerationConfig,
    generator: torch.Generator | None = None,
) -> tuple[np.ndarray, KvCache]:
    """Feed START, then emit ``steps`` token positions and one END.

    Returns the emitted rows (including the END row) for batch element 0 and
    the extended cache. With ``enforce_length`` END is masked everywhere except
    the boundary step, where it is the only allowed choice.
    """
    if not cache.keys:
        raise CacheInvalid("cache invalid: generate_track needs a prefilled cache")
    K, R, V = lm.cfg.codebook_size, lm.cfg.rvq_layers, lm.cfg.vocab
    B = cache.keys[0].shape[0]
    end = SpecialToken.END.index(K)
    start = torch.full((B, R), SpecialToken.START.index(K), dtype=torch.long)
    logits, cache = lm.step_tokens(cache, start, SPECIAL)
    codes_only = allowed_mask(V, K, allow_end=False)
    with_end = allowed_mask(V, K, allow_end=True)
    end_only = torch.zeros(V, dtype=torch.bool)
    end_only[end] = True
    rows = []
    i = 0
    while True:
        if gen.enforce_length:
            allowed = end_only if i == steps else codes_only
        else:
            if i > steps:
                break
            allowed = with_end
        tok = select_tokens(logits, allowed, gen, generator)
        if bool((tok[:, 0] == end).all()):
            rows.append(torch.full((R,), end, dtype=torch.long))
            break
        # an END on a non-leading head without END on head 0 is not a delimiter
        tok = torch.where(tok == end, select_tokens(logits, codes_only, gen, generator), tok)
        rows.append(tok[0])
        logits, cache = lm.step_tokens(cache, tok, i % 2)
        i += 1
    return torch.stack(rows).numpy() if rows else np.zeros((0, R), dtype=np.int64), cache


@dataclass
class WindowResult:
    target_ids: np.ndarray
    tracks: list[TrackSequence]
    waves: list[np.ndarray]


@torch.no_grad()
def separate_window(
    mixture: np.ndarray,
    codec: CodecModel,
    model: Separator,
    gen: GenerationConfig,
    frames: int,
    generator: torch.Generator | None = None,
) -> WindowResult:
    model.eval()
    lm = model.lm
    sr = codec.cfg.sample_rate_hz
    mel = torch.from_numpy(model.mel(AudioBuffer(np.asarray(mixture, dtype=np.float32), sr)))[None]
    prefix = model.prefix(mel)
    P = prefix.shape[1]
    need = 1 + P + len(TRACKS) * (1 + 2 * frames)
    if need > lm.cfg.max_positions:
        raise ValidationError(f"length budget exceeded: {need} positions > max_positions {lm.cfg.max_positions}")
    _, cache = lm.prefill(prefix)
    prefix_cache = cache
    rows = []
    for _ in TRACKS:
        if not gen.preserve_cache:
            cache = KvCache(prefix_cache.keys, prefix_cache.values, prefix_cache.positions, cache.next_position)
        r, cache = generate_track(lm, cache, 2 * frames, gen, generator)
        rows.append(r)
    target_ids = np.concatenate(rows)
    tracks = split_tracks(target_ids, lm.cfg.codebook_size)
    waves = []
    for t in tracks:
        if len(t) != 2 * frames:
            raise ValidationError(f"malformed generation: track {t.track} has {len(t)} positions, expected {2 * frames}")
        a, s = deinterleave(t, codec.cfg.frame_rate_hz, codec.cfg.codebook_size)
        waves.append(codec.decode(a, s).samples)
    return WindowResult(target_ids, tracks, waves)


def window_starts(n: int, win: int, hop: int) -> list[int]:
    if n <= win:
        return [0]
    starts = list(range(0, n - win, hop))
    if starts[-1] + win < n:
        starts.append(n - win)
    return starts


@dataclass
class SeparationResult:
    stems: list[AudioBuffer]
    windows: list[WindowResult] = field(default_factory=list)


def separate_detailed(
    mixture: AudioBuffer, codec: CodecModel, model: Separator, gen: GenerationConfig | None = None
) -> SeparationResult:
    gen = gen or model.cfg.generation
    cc = codec.cfg
    if mixture.sample_rate_hz != cc.sample_rate_hz:
        raise ValidationError("resample required")
    x = np.asarray(mixture.samples, dtype=np.float32)
    n = len(x)
    if n == 0:
        raise ValidationError("empty input")
    generator = torch_generator(gen.seed, "sampling") if gen.mode == "sampled" else None
    win = cc.frames_for(int(round(model.cfg.train.segment_s * cc.sample_rate_hz))) * cc.hop_samples
    if n <= win:
        frames = cc.frames_for(n)
        res = separate_window(x, codec, model, gen, frames, generator)
        stems = [AudioBuffer(w[:n].astype(np.float32), cc.sample_rate_hz) for w in res.waves]
        return SeparationResult(stems, [res])

    xf = min(int(round(gen.crossfade_s * cc.sample_rate_hz)), win // 2)
    starts = window_starts(n, win, win - xf)
    acc = np.zeros((len(TRACKS), n))
    norm = np.zeros(n)
    results = []
    frames = win // cc.hop_samples
    for j, s in enumerate(starts):
        res = separate_window(x[s : s + win], codec, model, gen, frames, generator)
        results.append(res)
        w = np.ones(win)
        ramp = (np.arange(xf) + 0.5) / xf if xf else np.zeros(0)
        if j > 0 and xf:
            w[:xf] = ramp
        if j < len(starts) - 1 and xf:
            w[win - xf :] = ramp[::-1]
        for k, wave in enumerate(res.waves):
            acc[k, s : s + win] += w * wave[:win]
        norm[s : s + win] += w
    stems = [AudioBuffer((acc[k] / norm).astype(np.float32), cc.sample_rate_hz) for k in range(len(TRACKS))]
    return SeparationResult(stems, results)


def separate(mixture: AudioBuffer, codec: CodecModel, model: Separator, gen: GenerationConfig | None = None) -> list[AudioBuffer]:
    """Return vocals, drums, bass, other for one mixture."""
    return separate_detailed(mixture, codec, model, gen).stems


# --------------------------------------------------------------------------
# evaluation


def _check_lengths(a: AudioBuffer, b: AudioBuffer, hop: int) -> None:
    if a.sample_rate_hz != b.sample_rate_hz:
        raise ValidationError("length mismatch: sample rates differ")
    if abs(len(a) - len(b)) > hop:
        raise ValidationError(f"length mismatch: {len(a)} vs {len(b)} samples")


def evaluate(
    references: Sequence[AudioBuffer],
    estimates: Sequence[AudioBuffer],
    codec: CodecModel,
    reference_tokens: Sequence[np.ndarray] | None = None,
    estimate_tokens: Sequence[np.ndarray] | None = None,
) -> dict:
    """Per-track mel-L1 and SI-SNR against codec-roundtripped references."""
    if len(references) != len(TRACKS) or len(estimates) != len(TRACKS):
        raise ValidationError("expected four tracks")
    report = {"tracks": {}}
    for k, name in enumerate(TRACKS):
        ref, est = references[k], estimates[k]
        _check_lengths(ref, est, codec.cfg.hop_samples)
        rt = codec.roundtrip(ref)
        entry = {
            "mel_l1": mel_l1(est, rt, codec.cfg.n_mels, codec.cfg.fft_size, codec.cfg.mel_hop),
            "si_snr_db": si_snr(est.samples, rt.samples, SI_SNR_CAP_DB),
        }
        if reference_tokens is not None and estimate_tokens is not None:
            gt, pr = np.asarray(reference_tokens[k]), np.asarray(estimate_tokens[k])
            n = min(len(gt), len(pr))
            entry["token_accuracy"] = float((gt[:n] == pr[:n]).mean()) if n else 0.0
            entry["token_accuracy_head0"] = float((gt[:n, 0] == pr[:n, 0]).mean()) if n else 0.0
        report["tracks"][name] = entry
    report["mean_mel_l1"] = float(np.mean([v["mel_l1"] for v in report["tracks"].values()]))
    return report


def no_separation_baseline(references: Sequence[AudioBuffer], mixture: AudioBuffer, codec: CodecModel) -> dict:
    return evaluate(references, [mixture] * len(TRACKS), codec)


def write_report(report: dict, out_dir, stem: str = "report") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jpath, cpath = out_dir / f"{stem}.json", out_dir / f"{stem}.csv"
    jpath.write_text(json.dumps(report, indent=2, sort_keys=True))
    rows = []
    for section in ("estimate", "baseline"):
        block = report.get(section, report if section == "estimate" else None)
        if not block or "tracks" not in block:
            continue
        for name, m in block["tracks"].items():
            rows.append({"section": section, "track": name, **m})
    keys = ["section", "track", "mel_l1", "si_snr_db", "token_accuracy", "token_accuracy_head0"]
    with open(cpath, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r.get(k), float) else r.get(k, "")) for k in keys})
    return jpath, cpath
