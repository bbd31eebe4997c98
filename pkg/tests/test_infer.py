import numpy as np
import pytest
import torch

import toksep.infer as infer
from toksep import TRACKS
from toksep.codec import CodecModel
from toksep.config import GenerationConfig, RunConfig
from toksep.dsp import AudioBuffer, mel_l1
from toksep.errors import CacheInvalid, ValidationError
from toksep.lm import KvCache
from toksep.model import Separator
from toksep.seqlayout import SpecialToken, assemble_prompt
from toksep.synth import make_dataset

SR = 48000


def tiny_cfg(segment_s=4.0, max_positions=1024, **gen):
    return RunConfig.from_dict(
        {
            "codec": {"channels": [4, 4, 8, 8], "dim": 8, "codebook_size": 16, "rvq_layers": 2, "decoder_channels": 16, "semantic_filters": 8},
            "conformer": {"layers": 1, "heads": 2, "model_dim": 16, "conv_kernel": 3, "lm_hidden": 32},
            "lm": {"layers": 2, "heads": 2, "hidden": 32, "rvq_layers": 2, "codebook_size": 16, "max_positions": max_positions},
            "train": {"segment_s": segment_s},
            "generation": gen,
        }
    )


@pytest.fixture(scope="module")
def codec():
    return CodecModel(tiny_cfg().codec).eval()


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return Separator(tiny_cfg()).eval()


@pytest.fixture(scope="module")
def clip():
    mix, stems = make_dataset(1, duration_s=4.0, seed=5)[0]
    return mix, stems


def prefilled(model, seconds=1.0):
    mel = torch.from_numpy(model.mel(AudioBuffer(np.zeros(int(seconds * SR), np.float32), SR)))[None]
    return model.lm.prefill(model.prefix(mel))[1]


# ---------------------------------------------------------------- token selection


def test_greedy_matches_linear_scan_oracle():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(3, 2, 20, generator=g)
    allowed = infer.allowed_mask(20, 16, allow_end=True)
    got = infer.select_tokens(logits, allowed, GenerationConfig())
    for b in range(3):
        for h in range(2):
            best, best_v = None, -float("inf")
            for v in range(20):
                if allowed[v] and logits[b, h, v] > best_v:
                    best, best_v = v, logits[b, h, v].item()
            assert got[b, h].item() == best


def test_sampling_respects_mask_and_top_k():
    logits = torch.zeros(1, 1, 20)
    logits[0, 0, 3] = 5.0
    logits[0, 0, 18] = 50.0  # disallowed special token
    allowed = infer.allowed_mask(20, 16, allow_end=False)
    gen = GenerationConfig(mode="sampled", top_k=1)
    g = torch.Generator().manual_seed(0)
    assert all(infer.select_tokens(logits, allowed, gen, g).item() == 3 for _ in range(20))
    gen = GenerationConfig(mode="sampled", temperature=1.0)
    draws = {infer.select_tokens(logits, allowed, gen, g).item() for _ in range(200)}
    assert draws <= set(range(16))


# ---------------------------------------------------------------- track generation


def test_zero_steps_emits_only_end(model):
    rows, _ = infer.generate_track(model.lm, prefilled(model), 0, GenerationConfig())
    assert rows.shape == (1, 2) and np.all(rows == SpecialToken.END.index(16))


def test_enforced_length_has_end_only_at_boundary(model):
    rows, cache = infer.generate_track(model.lm, prefilled(model), 9, GenerationConfig(mode="sampled", seed=1), torch.Generator().manual_seed(1))
    end = SpecialToken.END.index(16)
    assert rows.shape == (10, 2)
    assert np.all(rows[-1] == end)
    assert np.all(rows[:-1] < 16)


def test_empty_cache_is_invalid(model):
    with pytest.raises(CacheInvalid, match="cache invalid"):
        infer.generate_track(model.lm, KvCache([], [], torch.zeros(0, dtype=torch.long), 0), 3, GenerationConfig())


def test_window_is_404_positions_for_four_seconds(codec, model, clip):
    res = infer.separate_window(clip[0].samples, codec, model, GenerationConfig(), 50)
    assert len(res.target_ids) == 4 * (1 + 2 * 50) == 404
    assert [len(t) for t in res.tracks] == [100] * 4
    assert [t.track for t in res.tracks] == list(TRACKS)


def test_incremental_generation_equals_full_forward_argmax(codec, model, clip):
    """Greedy decode with the cache picks the argmax of a fresh full forward pass at every position."""
    res = infer.separate_window(clip[0].samples[: SR], codec, model, GenerationConfig(), 12)
    mel = torch.from_numpy(model.mel(AudioBuffer(clip[0].samples[:SR], SR)))[None]
    P = model.prefix(mel).shape[1]
    layout = assemble_prompt(res.tracks, P, 16)
    n = len(res.target_ids)
    assert np.array_equal(layout.target_ids[-n:], res.target_ids)
    with torch.no_grad():
        logits = model(mel, torch.from_numpy(layout.token_ids)[None], torch.from_numpy(layout.token_streams)[None])[0, -n:]
    end = SpecialToken.END.index(16)
    codes = logits[..., :16].argmax(-1).numpy()
    is_end = np.all(res.target_ids == end, axis=1)
    assert np.array_equal(codes[~is_end], res.target_ids[~is_end])


def test_prefix_only_cache_changes_later_tracks(codec, model, clip):
    x = clip[0].samples[:SR]
    keep = infer.separate_window(x, codec, model, GenerationConfig(), 12)
    drop = infer.separate_window(x, codec, model, GenerationConfig(preserve_cache=False), 12)
    assert np.array_equal(keep.tracks[0].tokens, drop.tracks[0].tokens)
    assert any(not np.array_equal(a.tokens, b.tokens) for a, b in zip(keep.tracks[1:], drop.tracks[1:]))


def test_length_budget(codec, clip):
    small = Separator(tiny_cfg(max_positions=64)).eval()
    with pytest.raises(ValidationError, match="length budget exceeded"):
        infer.separate_window(clip[0].samples, codec, small, GenerationConfig(), 50)


def test_early_end_is_malformed(codec, model, clip, monkeypatch):
    real = model.lm.step_tokens
    end = SpecialToken.END.index(16)

    def eager_end(cache, tokens, stream):
        logits, cache = real(cache, tokens, stream)
        logits[..., end] = 1e4
        return logits, cache

    monkeypatch.setattr(model.lm, "step_tokens", eager_end)
    with pytest.raises(ValidationError, match="malformed generation"):
        infer.separate_window(clip[0].samples[:SR], codec, model, GenerationConfig(enforce_length=False), 12)


# ---------------------------------------------------------------- full separation


def test_four_stems_match_input_length(codec, model, clip):
    for n in (SR, int(2.7 * SR)):
        x = AudioBuffer(clip[0].samples[:n], SR)
        stems = infer.separate(x, codec, model)
        assert len(stems) == 4 and all(len(s) == n and s.sample_rate_hz == SR for s in stems)


def test_greedy_and_seeded_sampling_are_deterministic(codec, model, clip):
    x = AudioBuffer(clip[0].samples[:SR], SR)
    a = infer.separate(x, codec, model)
    b = infer.separate(x, codec, model)
    assert all(np.array_equal(p.samples, q.samples) for p, q in zip(a, b))
    s1 = infer.separate_detailed(x, codec, model, GenerationConfig(mode="sampled", seed=3))
    s2 = infer.separate_detailed(x, codec, model, GenerationConfig(mode="sampled", seed=3))
    assert np.array_equal(s1.windows[0].target_ids, s2.windows[0].target_ids)


def test_window_starts():
    assert infer.window_starts(10, 10, 8) == [0]
    assert infer.window_starts(20, 10, 8) == [0, 8, 10]
    assert infer.window_starts(26, 10, 8) == [0, 8, 16]
    for n in range(11, 60):
        s = infer.window_starts(n, 10, 8)
        assert s[0] == 0 and s[-1] + 10 == n and all(b - a <= 8 for a, b in zip(s, s[1:]))


def test_overlap_add_is_normalised(codec, clip, monkeypatch):
    """Windows that all decode to a constant must stitch to that constant."""
    model = Separator(tiny_cfg(segment_s=1.0)).eval()

    def const(mixture, codec, model, gen, frames, generator=None):
        return infer.WindowResult(np.zeros((0, 2)), [], [np.full(frames * codec.cfg.hop_samples, 0.25)] * 4)

    monkeypatch.setattr(infer, "separate_window", const)
    stems = infer.separate(AudioBuffer(clip[0].samples[: int(3.3 * SR)], SR), codec, model)
    assert all(np.allclose(s.samples, 0.25, atol=1e-7) for s in stems)


def test_input_checks(codec, model):
    with pytest.raises(ValidationError, match="resample required"):
        infer.separate(AudioBuffer(np.zeros(100, np.float32), 44100), codec, model)
    with pytest.raises(ValidationError, match="empty input"):
        infer.separate(AudioBuffer(np.zeros(0, np.float32), SR), codec, model)


# ---------------------------------------------------------------- evaluation


def test_evaluate_identity_and_baseline(codec, clip):
    mix, stems = clip
    perfect = [codec.roundtrip(s) for s in stems]
    rep = infer.evaluate(stems, perfect, codec)
    for name in TRACKS:
        assert rep["tracks"][name]["mel_l1"] == 0.0
        assert rep["tracks"][name]["si_snr_db"] == pytest.approx(infer.SI_SNR_CAP_DB)
    base = infer.no_separation_baseline(stems, mix, codec)
    for k, name in enumerate(TRACKS):
        assert base["tracks"][name]["mel_l1"] == pytest.approx(mel_l1(mix, codec.roundtrip(stems[k])), abs=1e-12)


def test_evaluate_token_accuracy(codec, clip):
    mix, stems = clip
    gt = [np.arange(20).reshape(10, 2) % 16 for _ in TRACKS]
    pr = [g.copy() for g in gt]
    pr[0][:5, 1] = 15 - pr[0][:5, 1]
    rep = infer.evaluate(stems, stems, codec, gt, pr)
    assert rep["tracks"]["vocals"]["token_accuracy"] == 0.75
    assert rep["tracks"]["vocals"]["token_accuracy_head0"] == 1.0
    assert rep["tracks"]["drums"]["token_accuracy"] == 1.0


def test_length_mismatch(codec, clip):
    _, stems = clip
    short = [AudioBuffer(s.samples[: len(s) - 2 * codec.cfg.hop_samples], SR) for s in stems]
    with pytest.raises(ValidationError, match="length mismatch"):
        infer.evaluate(stems, short, codec)


def test_write_report(tmp_path, codec, clip):
    mix, stems = clip
    rep = {"estimate": infer.evaluate(stems, stems, codec), "baseline": infer.no_separation_baseline(stems, mix, codec)}
    j, c = infer.write_report(rep, tmp_path)
    lines = c.read_text().splitlines()
    assert lines[0].startswith("section,track,mel_l1") and len(lines) == 9
