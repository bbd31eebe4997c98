"""Acceptance suite: one PASS/FAIL line per criterion, printed in the terminal summary.

Run with ``pytest tests/test_acceptance.py -v`` (about 35 minutes on one CPU core)
or ``python tests/test_acceptance.py``. Criteria 5 to 7 share one fresh training
run of the codec and the separator on synthetic clips.
"""

import math
import os
import time

import numpy as np
import pytest
import torch

from gradcheck import fd_check
from toksep import TRACKS
from toksep.augment import apply_eq, apply_gain, apply_polarity
from toksep.codec import CodecConfig, train_codec
from toksep.condenc import ConditionalEncoder, ConformerConfig
from toksep.config import load_config
from toksep.dsp import AudioBuffer, mel_l1, stft
from toksep.infer import evaluate, no_separation_baseline, separate
from toksep.lm import KvCache
from toksep.model import load_separator, save_separator
from toksep.selftest import _tiny_inputs, _tiny_lm, check_causal_probe, check_layout_roundtrip, incremental_max_diff
from toksep.synth import make_dataset
from toksep.train import collate, compute_loss, prepare_epoch, teacher_forced_accuracy, train_separator

RESULTS: list[tuple[str, bool, str]] = []
SEP_STEPS = int(os.environ.get("TOKSEP_ACCEPT_STEPS", "1500"))


def record(name: str, ok: bool, detail: str) -> None:
    RESULTS.append((name, ok, detail))
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------- 1


def test_criterion_1_layout_round_trips():
    t0 = time.time()
    ok, detail = check_layout_roundtrip(cases=1000, seed=11)
    dt = time.time() - t0
    record("1 layout round trips", ok and dt < 10, f"{detail}, {dt:.2f}s (limit 10s)")


# ---------------------------------------------------------------- 2


@torch.no_grad()
def _cross_track_ablation_diff() -> float:
    """Logit change on the second track when the cache keeps only the prefix."""
    lm = _tiny_lm(torch.float64)
    prefix, tokens, streams = _tiny_inputs(lm, torch.float64)
    _, cache = lm.prefill(prefix)
    prefix_cache = cache
    track_len = tokens.shape[1] // 4
    for i in range(track_len):
        _, cache = lm.step_tokens(cache, tokens[:, i], int(streams[0, i]))
    pruned = KvCache(prefix_cache.keys, prefix_cache.values, prefix_cache.positions, cache.next_position)
    a, _ = lm.step_tokens(cache, tokens[:, track_len], int(streams[0, track_len]))
    b, _ = lm.step_tokens(pruned, tokens[:, track_len], int(streams[0, track_len]))
    return float((a - b).abs().max())


def test_criterion_2_causality_and_cache():
    t0 = time.time()
    causal, _ = check_causal_probe()
    d32, d64 = incremental_max_diff(torch.float32), incremental_max_diff(torch.float64)
    ablation = _cross_track_ablation_diff()
    dt = time.time() - t0
    ok = causal and d32 <= 1e-4 and d64 <= 1e-12 and ablation > 0 and dt < 60
    record(
        "2 causality and cache",
        ok,
        f"causal probe {'exact' if causal else 'LEAKS'}, incremental vs full over 4 tracks: float32 {d32:.1e}, float64 {d64:.1e}; "
        f"prefix-only cache changes next-track logits by {ablation:.2e}; {dt:.1f}s",
    )


# ---------------------------------------------------------------- 3


def test_criterion_3_gradients():
    t0 = time.time()
    torch.manual_seed(0)
    enc = ConditionalEncoder(ConformerConfig(n_mels=8, layers=2, heads=2, model_dim=16, conv_kernel=5, dropout=0.0, lm_hidden=12)).double()
    x = torch.randn(2, 13, 8, dtype=torch.float64)
    w = torch.randn(2, 4, 12, dtype=torch.float64)
    e_enc = fd_check(enc, lambda: (enc(x) * w).sum(), n_params=50, seed=3)

    lm = _tiny_lm(torch.float64, seed=1)
    prefix, tokens, streams = _tiny_inputs(lm, torch.float64, seed=1)
    P, K = prefix.shape[1], lm.cfg.codebook_size
    targets = torch.full((1, 1 + P + tokens.shape[1], lm.cfg.rvq_layers), K + 3)
    targets[:, 1 + P : -1] = tokens[:, 1:]
    mask = targets[..., 0] != K + 3
    e_lm = fd_check(lm, lambda: compute_loss(lm(prefix, tokens, streams), targets, [2.0, 1.0], 0.1, mask)[0], n_params=50, seed=4)
    dt = time.time() - t0
    ok = e_enc <= 1e-4 and e_lm <= 1e-4 and dt < 300
    record("3 gradient correctness", ok, f"worst relative error condenc {e_enc:.1e}, lm {e_lm:.1e} (50 params each, float64), {dt:.1f}s")


# ---------------------------------------------------------------- 4


def _manual_loss(logits, targets, weights, eps):
    """Scalar-loop label-smoothed cross-entropy, weighted mean over heads, mean over positions."""
    N, R, V = logits.shape
    total = 0.0
    for n in range(N):
        acc = 0.0
        for r in range(R):
            row = [float(v) for v in logits[n, r]]
            m = max(row)
            lse = m + math.log(sum(math.exp(v - m) for v in row))
            ce = 0.0
            for v in range(V):
                q = (1 - eps) * (v == int(targets[n, r])) + eps / V
                ce -= q * (row[v] - lse)
            acc += weights[r] * ce
        total += acc / sum(weights)
    return total / N


def test_criterion_4_loss_arithmetic():
    errs = {}
    logits = torch.tensor([[[2.0, 0.0, 0.0]]], dtype=torch.float64)
    z = math.log(math.exp(2) + 2)
    hand = -((0.9 + 0.1 / 3) * (2 - z) + 2 * (0.1 / 3) * (-z))
    errs["3-class hand case"] = abs(compute_loss(logits, torch.tensor([[0]]), [1.0], 0.1, torch.tensor([True]))[0].item() - hand)
    V = 1028
    uni = compute_loss(torch.zeros(6, 16, V, dtype=torch.float64), torch.randint(0, V, (6, 16)), [2.0] + [1.0] * 15, 0.1, torch.ones(6, dtype=torch.bool))[0]
    errs["uniform ln V"] = abs(uni.item() - math.log(V))
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(5, 16, 40, generator=g, dtype=torch.float64)
    targets = torch.randint(0, 40, (5, 16), generator=g)
    cfg_default = load_config(overrides={"codec.rvq_layers": 16, "lm.rvq_layers": 16})
    cfg_a2 = load_config(overrides={"codec.rvq_layers": 16, "lm.rvq_layers": 16, "train.rvq_loss_weights": [8, 4, 3, 2, 2, 2, 2, 2]})
    for name, cfg, expected in (
        ("weights [2,1,...,1]", cfg_default, [2.0] + [1.0] * 15),
        ("A2 weights [8,4,3,2,2,2,2,2]", cfg_a2, [8.0, 4.0, 3.0, 2.0, 2.0, 2.0, 2.0, 2.0] + [1.0] * 8),
    ):
        w = cfg.train.loss_weights(16)
        assert w == expected
        got = compute_loss(logits, targets, w, 0.1, torch.ones(5, dtype=torch.bool))[0].item()
        errs[name] = abs(got - _manual_loss(logits, targets, w, 0.1))
    worst = max(errs.values())
    record("4 loss arithmetic", worst <= 1e-9, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + " (limit 1e-9)")


# ---------------------------------------------------------------- 5 to 7: one fresh training run


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    torch.set_num_threads(1)
    out = tmp_path_factory.mktemp("accept")
    train = make_dataset(200, duration_s=4.0, seed=0)
    val = make_dataset(5, duration_s=4.0, seed=0, first_id=10000)
    held = make_dataset(20, duration_s=4.0, seed=0, first_id=20000)

    t0 = time.time()
    codec, hist = train_codec([a for m, s in train for a in [m, *s]], CodecConfig(), val=[a for m, s in val for a in [m, *s]])
    codec_seconds = time.time() - t0

    cfg = load_config(overrides={"train.max_steps": SEP_STEPS})
    digest_before = codec.digest()
    t0 = time.time()
    result = train_separator(train, codec, cfg, out_dir=out / "sep")
    sep_seconds = time.time() - t0
    return {
        "codec": codec, "codec_seconds": codec_seconds, "train": train, "held": held, "cfg": cfg,
        "result": result, "sep_seconds": sep_seconds, "digest_before": digest_before, "out": out,
    }


def test_criterion_5_rvq_properties(trained):
    codec, held = trained["codec"], trained["held"]
    clips = [a for m, s in held for a in [m, *s]]
    norms = {"acoustic": [], "semantic": []}
    with torch.no_grad():
        codec.eval()
        for c in clips:
            _, qa, qs = codec(torch.from_numpy(np.asarray(c.samples, np.float32))[None])
            norms["acoustic"].append(qa.residual_norms.reshape(-1, codec.cfg.rvq_layers).mean(0).numpy())
            norms["semantic"].append(qs.residual_norms.reshape(-1, codec.cfg.rvq_layers).mean(0).numpy())
    means = {k: np.mean(v, axis=0) for k, v in norms.items()}
    monotone = all(np.all(np.diff(m) <= 0) for m in means.values())
    rt = np.mean([mel_l1(c, codec.roundtrip(c)) for c in clips])
    sil = np.mean([mel_l1(c, AudioBuffer(np.zeros_like(c.samples), c.sample_rate_hz)) for c in clips])
    secs = trained["codec_seconds"]
    ok = monotone and rt <= 0.5 * sil and secs <= 1800
    fmt = lambda m: "[" + ", ".join(f"{x:.3f}" for x in m) + "]"
    record(
        "5 RVQ properties",
        ok,
        f"residual norms acoustic {fmt(means['acoustic'])} semantic {fmt(means['semantic'])}; "
        f"roundtrip mel-L1 {rt:.3f} vs silence {sil:.3f} (ratio {rt / sil:.3f}, limit 0.5); codec training {secs / 60:.1f} min (limit 30)",
    )


def test_criterion_6_toy_separation(trained):
    codec, model = trained["codec"], trained["result"].model
    est_l1, mix_l1, sil_l1 = np.zeros((20, 4)), np.zeros((20, 4)), np.zeros((20, 4))
    t0 = time.time()
    for i, (mix, stems) in enumerate(trained["held"]):
        est = separate(mix, codec, model)
        rep = evaluate(stems, est, codec)
        base = no_separation_baseline(stems, mix, codec)
        silence = evaluate(stems, [AudioBuffer(np.zeros_like(mix.samples), mix.sample_rate_hz)] * 4, codec)
        for k, t in enumerate(TRACKS):
            est_l1[i, k] = rep["tracks"][t]["mel_l1"]
            mix_l1[i, k] = base["tracks"][t]["mel_l1"]
            sil_l1[i, k] = silence["tracks"][t]["mel_l1"]
    sep_eval = time.time() - t0
    ratios = est_l1.mean(0) / mix_l1.mean(0)
    winners = int(np.sum(ratios <= 0.7))

    # overfit smoke test: 4 fixed clips, desk config, 500 steps
    t0 = time.time()
    four = make_dataset(4, duration_s=2.0, seed=0, first_id=500)
    ocfg = load_config(overrides={"train.max_steps": 500, "train.augment": False, "train.random_crop": False})
    over = train_separator(four, codec, ocfg)
    acc = teacher_forced_accuracy(over.model, prepare_epoch(four, codec, over.model, 0))
    over_secs = time.time() - t0

    budget = trained["codec_seconds"] + trained["sep_seconds"]
    ok = winners >= 3 and acc[0] >= 0.9 and budget <= 7200
    record(
        "6 toy separation",
        ok,
        "per-track mel-L1 ratio vs mixture baseline "
        + ", ".join(f"{t} {r:.3f}" for t, r in zip(TRACKS, ratios))
        + f" ({winners}/4 <= 0.7; silence-estimate ratios "
        + ", ".join(f"{r:.2f}" for r in sil_l1.mean(0) / mix_l1.mean(0))
        + f"); training {budget / 60:.1f} min for {SEP_STEPS} separator steps (limit 120), separation {sep_eval:.0f}s; "
        f"overfit head-0 accuracy {acc[0]:.3f} after 500 steps ({over_secs:.0f}s)",
    )


def test_criterion_7_determinism_and_freezing(trained):
    codec, result = trained["codec"], trained["result"]
    few = trained["train"][:8]
    cfg = load_config(overrides={"train.max_steps": 6})
    a = [h["loss"] for h in train_separator(few, codec, cfg).history]
    b = [h["loss"] for h in train_separator(few, codec, load_config(overrides={"train.max_steps": 6})).history]
    same_losses = a == b
    frozen = codec.digest() == trained["digest_before"] == result.codec_digest

    path = trained["out"] / "reload"
    save_separator(path, result.model, step=len(result.history), codec_digest=result.codec_digest)
    reloaded, _, _ = load_separator(path)
    exs = prepare_epoch(few, codec, result.model, 0, augment_data=False)
    mel, tokens, streams, _, _ = collate(exs, codec.cfg.codebook_size)
    with torch.no_grad():
        identical = torch.equal(result.model.eval()(mel, tokens, streams), reloaded.eval()(mel, tokens, streams))
    ok = same_losses and frozen and identical
    record(
        "7 determinism and freezing",
        ok,
        f"loss sequence {'identical' if same_losses else 'DIFFERS'} over {len(a)} steps; codec digest "
        f"{'unchanged' if frozen else 'CHANGED'}; reloaded eval logits {'bit-identical' if identical else 'DIFFER'}",
    )


# ---------------------------------------------------------------- 8


def test_criterion_8_augmentation_contracts():
    rng = np.random.default_rng(8)
    rms = lambda x: float(np.sqrt(np.mean(np.asarray(x, np.float64) ** 2)))
    gain_err = pol_err = eq_err = 0.0
    for _ in range(50):
        x = (rng.standard_normal(48000) * rng.uniform(0.01, 0.5)).astype(np.float32)
        g = rng.uniform(0.5, 1.5)
        gain_err = max(gain_err, abs(rms(apply_gain(x, g)) - g * rms(x)) / rms(x))
        mag = stft(AudioBuffer(x, 48000)).magnitudes
        pol_err = max(pol_err, float(np.abs(stft(AudioBuffer(apply_polarity(x, True), 48000)).magnitudes - mag).max()))
        eq_err = max(eq_err, float(np.abs(apply_eq(x, [0.0] * 7, 48000) - x).max()))
    ok = max(gain_err, pol_err, eq_err) <= 1e-6
    record("8 augmentation contracts", ok, f"gain/RMS rel err {gain_err:.1e}, polarity |STFT| diff {pol_err:.1e}, flat EQ max diff {eq_err:.1e} (limit 1e-6)")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
