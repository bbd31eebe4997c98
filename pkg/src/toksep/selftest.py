"""Fast invariant suite behind ``toksep selftest``; each check returns (ok, detail)."""

from __future__ import annotations

import math
import tempfile
import time
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import TRACKS, checkpoint
from .errors import ValidationError
from .lm import LmConfig, SeparationLM
from .seqlayout import SpecialToken, TokenGrid, TrackSequence, assemble_prompt, deinterleave, interleave, split_tracks
from .train import compute_loss


def _random_tracks(rng, frames, R, K):
    out = []
    for name in TRACKS:
        a = TokenGrid(rng.integers(0, K, (frames, R)), "acoustic")
        s = TokenGrid(rng.integers(0, K, (frames, R)), "semantic")
        out.append((a, s, TrackSequence(interleave(a, s).tokens, name)))
    return out


def check_layout_roundtrip(cases: int = 200, seed: int = 0):
    rng = np.random.default_rng(seed)
    for _ in range(cases):
        K, R, frames, P = int(rng.integers(2, 64)), int(rng.integers(1, 5)), int(rng.integers(0, 8)), int(rng.integers(0, 5))
        tracks = _random_tracks(rng, frames, R, K)
        layout = assemble_prompt([t for _, _, t in tracks], P, K)
        back = split_tracks(layout.target_ids, K)
        for (a, s, t), b in zip(tracks, back):
            a2, s2 = deinterleave(b, 12.5, K)
            if not (np.array_equal(t.tokens, b.tokens) and np.array_equal(a.indices, a2.indices) and np.array_equal(s.indices, s2.indices)):
                return False, "round trip differs"
    return True, f"{cases} random layouts"


def _tiny_lm(dtype=torch.float32, seed=0):
    torch.manual_seed(seed)
    lm = SeparationLM(LmConfig(layers=2, heads=2, hidden=32, dropout=0.0, rvq_layers=2, codebook_size=8, max_positions=128))
    return lm.to(dtype).eval()


def _tiny_inputs(lm, dtype, seed=0, P=3, frames=2):
    rng = np.random.default_rng(seed)
    K, R = lm.cfg.codebook_size, lm.cfg.rvq_layers
    tracks = [t for _, _, t in _random_tracks(rng, frames, R, K)]
    layout = assemble_prompt(tracks, P, K)
    g = torch.Generator().manual_seed(seed)
    prefix = torch.randn(1, P, lm.cfg.hidden, generator=g, dtype=dtype)
    tokens = torch.from_numpy(layout.token_ids)[None]
    streams = torch.from_numpy(layout.token_streams)[None]
    return prefix, tokens, streams


@torch.no_grad()
def check_causal_probe():
    lm = _tiny_lm()
    prefix, tokens, streams = _tiny_inputs(lm, torch.float32)
    full = lm(prefix, tokens, streams)
    cut = tokens.shape[1] // 2
    altered = tokens.clone()
    altered[:, cut:] = (altered[:, cut:] + 1) % lm.cfg.codebook_size
    other = lm(prefix, altered, streams)
    n = 1 + prefix.shape[1] + cut
    ok = torch.equal(full[:, :n], other[:, :n])
    return ok, "logits before the edit are identical" if ok else "future tokens leak into past logits"


@torch.no_grad()
def incremental_max_diff(dtype=torch.float32) -> float:
    lm = _tiny_lm(dtype)
    prefix, tokens, streams = _tiny_inputs(lm, dtype)
    full = lm(prefix, tokens, streams)
    logits, cache = lm.prefill(prefix)
    worst = (logits - full[:, prefix.shape[1]]).abs().max().item()
    for i in range(tokens.shape[1]):
        logits, cache = lm.step_tokens(cache, tokens[:, i], int(streams[0, i]))
        worst = max(worst, (logits - full[:, prefix.shape[1] + 1 + i]).abs().max().item())
    return worst


def check_kv_cache():
    d32, d64 = incremental_max_diff(torch.float32), incremental_max_diff(torch.float64)
    ok = d32 <= 1e-4 and d64 <= 1e-12
    return ok, f"max |diff| float32 {d32:.2e}, float64 {d64:.2e}"


def check_gradient(n_params: int = 50, seed: int = 0):
    """Central finite differences against autograd on a float64 tiny model."""
    lm = _tiny_lm(torch.float64, seed)
    prefix, tokens, streams = _tiny_inputs(lm, torch.float64, seed)
    K = lm.cfg.codebook_size
    targets = torch.full(tokens.shape[:1] + (1 + prefix.shape[1] + tokens.shape[1], lm.cfg.rvq_layers), SpecialToken.PAD.index(K))
    targets[:, 1 + prefix.shape[1] : -1] = tokens[:, 1:]
    mask = torch.zeros(targets.shape[:2], dtype=torch.bool)
    mask[:, 1 + prefix.shape[1] : -1] = True

    def loss_fn():
        return compute_loss(lm(prefix, tokens, streams), targets, [2.0, 1.0], 0.1, mask)[0]

    lm.zero_grad()
    loss_fn().backward()
    params = [p for p in lm.parameters() if p.grad is not None]
    rng = np.random.default_rng(seed)
    worst = 0.0
    h = 1e-5
    for _ in range(n_params):
        p = params[rng.integers(len(params))]
        flat = p.data.view(-1)
        j = int(rng.integers(flat.numel()))
        old = flat[j].item()
        with torch.no_grad():
            flat[j] = old + h
            up = loss_fn().item()
            flat[j] = old - h
            down = loss_fn().item()
            flat[j] = old
        fd = (up - down) / (2 * h)
        an = p.grad.view(-1)[j].item()
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst < 1e-4, f"worst relative error {worst:.2e} over {n_params} parameters"


def check_loss_hand_case():
    logits = torch.tensor([[[2.0, 0.0, 0.0]]], dtype=torch.float64)
    target = torch.tensor([[0]])
    loss, _ = compute_loss(logits, target, [1.0], 0.1, torch.tensor([True]))
    z = math.log(math.exp(2) + 2)
    logp = [2 - z, -z, -z]
    q = [0.9 + 0.1 / 3, 0.1 / 3, 0.1 / 3]
    expected = -sum(a * b for a, b in zip(q, logp))
    uniform, _ = compute_loss(torch.zeros(5, 2, 7), torch.zeros(5, 2, dtype=torch.long), [2.0, 1.0], 0.0, torch.ones(5, dtype=torch.bool))
    ok = abs(loss.item() - expected) < 1e-12 and abs(uniform.item() - math.log(7)) < 1e-6
    return ok, f"hand case {loss.item():.12f} vs {expected:.12f}"


def check_checkpoint_digest():
    lm = _tiny_lm()
    with tempfile.TemporaryDirectory() as d:
        checkpoint.save_container(d, lm.state_dict(), {})
        checkpoint.load_container(d)
        blob = sorted(Path(d).glob("t*.bin"))[0]
        raw = bytearray(blob.read_bytes())
        raw[0] ^= 0xFF
        blob.write_bytes(bytes(raw))
        try:
            checkpoint.load_container(d)
        except ValidationError as exc:
            return "digest mismatch" in str(exc), str(exc)
    return False, "corruption not detected"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "interleave round trip": check_layout_roundtrip,
    "causal probe": check_causal_probe,
    "kv-cache equivalence": check_kv_cache,
    "gradient check": check_gradient,
    "loss hand cases": check_loss_hand_case,
    "checkpoint digest": check_checkpoint_digest,
}


def run_selftest(emit=print) -> bool:
    ok_all = True
    for name, fn in CHECKS.items():
        t0 = time.time()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failure of that property
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= ok
        emit(f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({time.time() - t0:.2f}s)")
    return ok_all
