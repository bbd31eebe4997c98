"""Teacher-forced training of the conditional encoder and LM over frozen codec tokens."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import TRACKS
from .augment import augment
from .codec import CodecModel
from .config import RunConfig, TrainConfig
from .dsp import AudioBuffer
from .errors import ToksepError, TrainingDiverged, ValidationError
from .model import Separator, load_separator, save_separator
from .seeding import derive_seed, numpy_rng
from .seqlayout import SpecialToken, TokenGrid, TrackSequence, assemble_prompt, interleave

log = logging.getLogger(__name__)

Clip = tuple[AudioBuffer, Sequence[AudioBuffer]]


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < 0:
        raise ValidationError("step must be >= 0")
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    return cfg.lr * cfg.decay ** (step - cfg.warmup_steps)


def compute_loss(logits, targets, weights, eps: float, mask):
    """Weighted mean over RVQ heads of label-smoothed cross-entropy.

    ``logits`` (..., R, V), ``targets`` (..., R), ``mask`` (...) bool.
    Returns ``(loss, per_head_ce)``; masked-out positions contribute exactly
    nothing, whatever their target value.
    """
    R, V = logits.shape[-2:]
    w = torch.as_tensor(weights, dtype=logits.dtype)
    if w.numel() != R:
        raise ValidationError(f"expected {R} loss weights, got {w.numel()}")
    if bool((w <= 0).any()):
        raise ValidationError("loss weights must be > 0")
    mask = torch.as_tensor(mask, dtype=torch.bool)
    n = mask.sum()
    if int(n) == 0:
        raise ValidationError("empty supervision")
    logp = logits.log_softmax(-1)
    safe = torch.where(mask[..., None], targets, torch.zeros_like(targets))
    nll = -logp.gather(-1, safe[..., None])[..., 0]
    smooth = -logp.mean(-1)
    ce = (1 - eps) * nll + eps * smooth  # (..., R)
    ce = torch.where(mask[..., None], ce, torch.zeros_like(ce))
    per_head = ce.reshape(-1, R).sum(0) / n
    return (per_head * w).sum() / w.sum(), per_head


# --------------------------------------------------------------------------
# data


@dataclass
class Example:
    mel: np.ndarray  # (frames, n_mels)
    tokens: np.ndarray  # (L, R) LM input rows after the prefix
    streams: np.ndarray  # (L,)
    targets: np.ndarray  # (L, R)
    prefix_len: int
    key: tuple = ()


def segment_samples(cfg: RunConfig) -> int:
    return cfg.codec.frames_for(int(round(cfg.train.segment_s * cfg.codec.sample_rate_hz))) * cfg.codec.hop_samples


def tokenize_tracks(codec: CodecModel, stems: Sequence[np.ndarray]) -> list[TrackSequence]:
    wave = torch.from_numpy(np.stack([np.asarray(s, dtype=np.float32) for s in stems]))
    a, s = codec.encode_tensor(wave)
    out = []
    for i, name in enumerate(TRACKS):
        seq = interleave(TokenGrid(a[i].numpy(), "acoustic"), TokenGrid(s[i].numpy(), "semantic"))
        out.append(TrackSequence(seq.tokens, name))
    return out


def make_example(model_cfg: RunConfig, codec: CodecModel, separator_mel, mixture: np.ndarray, stems, key=()) -> Example:
    mel = separator_mel(AudioBuffer(mixture, model_cfg.codec.sample_rate_hz))
    P = model_cfg.conformer.prefix_len(mel.shape[0])
    layout = assemble_prompt(tokenize_tracks(codec, stems), P, model_cfg.codec.codebook_size)
    return Example(mel, layout.token_ids, layout.token_streams, layout.target_ids, P, key)


def prepare_epoch(
    dataset: Sequence[Clip], codec: CodecModel, model: Separator, epoch: int, augment_data: bool | None = None
) -> list[Example]:
    """Augment, crop and tokenize every clip once; keyed by (clip id, augmentation seed)."""
    cfg = model.cfg
    tc = cfg.train
    seg = segment_samples(cfg)
    hop = cfg.codec.hop_samples
    do_aug = tc.augment if augment_data is None else augment_data
    out = []
    for clip_id, (mix, stems) in enumerate(dataset):
        aug_seed = derive_seed(tc.seed, "augment", epoch, clip_id)
        rng = np.random.default_rng(aug_seed)
        n = len(mix)
        offset = 0
        if tc.random_crop and n > seg:
            offset = int(rng.integers(0, (n - seg) // hop + 1)) * hop
        cropped = []
        for s in stems:
            x = np.asarray(s.samples[offset : offset + seg], dtype=np.float32)
            if len(x) < seg:
                x = np.pad(x, (0, seg - len(x)))
            cropped.append(AudioBuffer(x, s.sample_rate_hz))
        if do_aug:
            mixture, cropped, _ = augment(cropped, rng)
            mixture = mixture.samples
        else:
            mixture = cropped[0].samples + cropped[1].samples + cropped[2].samples + cropped[3].samples
        out.append(make_example(cfg, codec, model.mel, mixture, [c.samples for c in cropped], (clip_id, aug_seed)))
    return out


def collate(examples: Sequence[Example], codebook_size: int):
    """Stack examples into (mel, tokens, streams, full-length targets, mask)."""
    P = examples[0].prefix_len
    L = examples[0].tokens.shape[0]
    if any(e.prefix_len != P or e.tokens.shape[0] != L for e in examples):
        raise ValidationError("batch examples must share layout lengths")
    mel = torch.from_numpy(np.stack([e.mel for e in examples]))
    tokens = torch.from_numpy(np.stack([e.tokens for e in examples]))
    streams = torch.from_numpy(np.stack([e.streams for e in examples]))
    R = tokens.shape[-1]
    pad = SpecialToken.PAD.index(codebook_size)
    targets = torch.full((len(examples), 1 + P + L, R), pad, dtype=torch.long)
    targets[:, 1 + P :] = torch.from_numpy(np.stack([e.targets for e in examples]))
    mask = torch.zeros(len(examples), 1 + P + L, dtype=torch.bool)
    mask[:, 1 + P :] = True
    mask &= ~(targets == pad).all(-1)
    return mel, tokens, streams, targets, mask


# --------------------------------------------------------------------------
# training loop


def make_optimizer(model: Separator) -> torch.optim.AdamW:
    tc = model.cfg.train
    return torch.optim.AdamW(model.parameters(), lr=tc.lr, betas=tc.betas, weight_decay=tc.weight_decay)


@dataclass
class TrainResult:
    model: Separator
    history: list[dict] = field(default_factory=list)
    codec_digest: str = ""
    seconds: float = 0.0


def loss_on_batch(model: Separator, batch, weights, eps):
    mel, tokens, streams, targets, mask = batch
    logits = model(mel, tokens, streams)
    return compute_loss(logits, targets, weights, eps, mask)


@torch.no_grad()
def teacher_forced_accuracy(model: Separator, examples: Sequence[Example], batch_size: int = 8) -> np.ndarray:
    """Top-1 accuracy per RVQ head over supervised positions (eval mode)."""
    model.eval()
    hits, total = 0, 0
    for i in range(0, len(examples), batch_size):
        mel, tokens, streams, targets, mask = collate(examples[i : i + batch_size], model.cfg.codec.codebook_size)
        pred = model(mel, tokens, streams).argmax(-1)
        hits = hits + ((pred == targets) & mask[..., None]).sum((0, 1)).numpy()
        total += int(mask.sum())
    return hits / max(total, 1)


@torch.no_grad()
def eval_loss(model: Separator, examples: Sequence[Example]) -> float:
    model.eval()
    weights = model.cfg.train.loss_weights(model.cfg.lm.rvq_layers)
    batch = collate(examples, model.cfg.codec.codebook_size)
    loss, _ = loss_on_batch(model, batch, weights, model.cfg.train.label_smoothing)
    return float(loss)


def write_loss_curve(path, history: Sequence[dict], rvq_layers: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "total_loss"] + [f"ce_head{r}" for r in range(rvq_layers)])
        for h in history:
            w.writerow([h["step"], repr(h["lr"]), repr(h["loss"])] + [repr(c) for c in h["per_head"]])


def read_loss_curve(path) -> list[dict]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        heads = sorted(k for k in r if k.startswith("ce_head"))
        out.append({"step": int(r["step"]), "lr": float(r["lr"]), "loss": float(r["total_loss"]), "per_head": [float(r[k]) for k in heads]})
    return out


def train_separator(
    dataset: Sequence[Clip],
    codec: CodecModel,
    cfg: RunConfig,
    out_dir=None,
    resume=None,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    t0 = time.time()
    codec.eval()
    codec_digest = codec.digest()
    if cfg.codec.codebook_size != codec.cfg.codebook_size or cfg.codec.rvq_layers != codec.cfg.rvq_layers:
        raise ValidationError("run config does not match the codec checkpoint")
    tc = cfg.train
    weights = tc.loss_weights(cfg.lm.rvq_layers)
    spe = max(1, len(dataset) // tc.batch_size)
    total = tc.max_steps or tc.epochs * spe

    history: list[dict] = []
    if resume is not None:
        model, manifest, opt = load_separator(resume, make_optimizer)
        if manifest.get("codec_digest") not in (None, codec_digest):
            raise ToksepError("codec not frozen: digest differs from the one recorded at training start")
        step = int(manifest.get("step", 0))
        curve = Path(resume) / "loss_curve.csv"
        if curve.exists():
            history = [h for h in read_loss_curve(curve) if h["step"] < step]
        model.cfg.train.max_steps = tc.max_steps
        model.cfg.train.epochs = tc.epochs
    else:
        model = Separator(cfg)
        opt = make_optimizer(model)
        step = 0

    examples: list[Example] = []
    current_epoch = -1
    while step < total:
        epoch = step // spe
        if epoch != current_epoch:
            examples = prepare_epoch(dataset, codec, model, epoch)
            order = numpy_rng(tc.seed, "order", epoch).permutation(len(examples))
            current_epoch = epoch
        b = step % spe
        batch = collate([examples[i] for i in order[b * tc.batch_size : (b + 1) * tc.batch_size]], cfg.codec.codebook_size)

        model.train()
        torch.manual_seed(derive_seed(tc.seed, "dropout", step))
        lr = lr_at(step + 1, tc)
        for g in opt.param_groups:
            g["lr"] = lr
        loss, per_head = loss_on_batch(model, batch, weights, tc.label_smoothing)
        if not torch.isfinite(loss):
            raise TrainingDiverged("diverged")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
        opt.step()
        rec = {"step": step, "lr": lr, "loss": float(loss.detach()), "per_head": [float(c) for c in per_head.detach()]}
        history.append(rec)
        if progress is not None:
            progress(rec)
        step += 1
        if out_dir is not None and tc.checkpoint_every and step % tc.checkpoint_every == 0 and step < total:
            _checkpoint(out_dir, model, opt, step, codec_digest, history)

    if codec.digest() != codec_digest:
        raise ToksepError("codec not frozen: parameters changed during separator training")
    model.eval()
    if out_dir is not None:
        _checkpoint(out_dir, model, opt, step, codec_digest, history)
    return TrainResult(model, history, codec_digest, time.time() - t0)


def _checkpoint(out_dir, model, opt, step, codec_digest, history):
    out_dir = Path(out_dir)
    save_separator(out_dir, model, step=step, optimizer=opt, codec_digest=codec_digest)
    write_loss_curve(out_dir / "loss_curve.csv", history, model.cfg.lm.rvq_layers)
