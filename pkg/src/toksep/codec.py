"""Miniature dual-path neural audio codec.

Two encoders map a waveform to feature frames at the codec frame rate:
a trainable strided-convolution acoustic encoder and a frozen, seed-fixed
filterbank encoder standing in for a pretrained semantic model. Each path
has its own residual vector quantizer (EMA codebooks); the decoder sees the
concatenation of both dequantized streams.
"""

from __future__ import annotations

import copy
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .dsp import AudioBuffer, mel_l1, torch_log_mel
from .errors import TrainingDiverged, ValidationError
from .seeding import derive_seed, numpy_rng, torch_generator
from .seqlayout import TokenGrid

log = logging.getLogger(__name__)


@dataclass
class CodecConfig:
    sample_rate_hz: int = 48000
    frame_rate_hz: float = 12.5
    rvq_layers: int = 4
    codebook_size: int = 128
    dim: int = 64
    strides: tuple[int, ...] = (8, 8, 6, 10)
    channels: tuple[int, ...] = (16, 32, 64, 128)
    decoder_channels: int = 256
    decoder_upsample: tuple[int, ...] = (2, 4)
    istft_fft: int = 1920
    semantic_filters: int = 48
    semantic_kernel: int = 512
    semantic_stride: int = 16
    semantic_seed: int = 1234
    ema_decay: float = 0.99
    dead_code_threshold: float = 1e-3
    commitment_weight: float = 0.25
    waveform_l2_weight: float = 0.1
    n_mels: int = 120
    fft_size: int = 2048
    mel_hop: int = 960
    # training
    epochs: int = 15
    batch_size: int = 8
    crop_s: float = 0.8
    lr: float = 2e-3
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.channels = tuple(int(c) for c in self.channels)
        self.decoder_upsample = tuple(int(s) for s in self.decoder_upsample)
        if self.rvq_layers < 1:
            raise ValidationError("codec.rvq_layers must be >= 1")
        if not 1 < self.codebook_size <= 65535:
            raise ValidationError("codec.codebook_size must be in (1, 65535]")
        if len(self.strides) != len(self.channels):
            raise ValidationError("codec.strides and codec.channels must have equal length")
        hop = self.sample_rate_hz / self.frame_rate_hz
        if abs(hop - round(hop)) > 1e-9 or math.prod(self.strides) != round(hop):
            raise ValidationError(
                f"codec.strides product {math.prod(self.strides)} must equal sample_rate/frame_rate = {hop}"
            )
        if round(hop) % math.prod(self.decoder_upsample):
            raise ValidationError("codec.decoder_upsample product must divide the codec hop")
        if self.istft_fft < self.istft_hop or self.istft_fft % 2:
            raise ValidationError("codec.istft_fft must be even and >= the synthesis hop")
        if round(hop) % self.semantic_stride:
            raise ValidationError("codec.semantic_stride must divide the codec hop")
        if not 0 <= self.ema_decay < 1:
            raise ValidationError("codec.ema_decay must be in [0, 1)")

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate_hz / self.frame_rate_hz))

    @property
    def istft_hop(self) -> int:
        return self.hop_samples // math.prod(self.decoder_upsample)

    def frames_for(self, n_samples: int) -> int:
        return -(-n_samples // self.hop_samples)


# --------------------------------------------------------------------------
# residual vector quantization


@dataclass
class QuantizeResult:
    indices: torch.Tensor  # (..., R)
    quantized: torch.Tensor  # (..., d)
    residual_norms: torch.Tensor  # (..., R)
    layer_inputs: list[torch.Tensor] = field(default_factory=list)
    commitment: torch.Tensor | None = None


class Codebook(nn.Module):
    def __init__(self, size: int, dim: int):
        super().__init__()
        self.register_buffer("vectors", torch.randn(size, dim) / math.sqrt(dim))
        self.register_buffer("ema_counts", torch.zeros(size))
        self.register_buffer("ema_sums", torch.zeros(size, dim))
        self.register_buffer("initialized", torch.tensor(False))

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    def nearest(self, x: torch.Tensor) -> torch.Tensor:
        flat = x.reshape(-1, x.shape[-1])
        d = flat.pow(2).sum(-1, keepdim=True) - 2 * flat @ self.vectors.T + self.vectors.pow(2).sum(-1)[None]
        return d.argmin(-1).reshape(x.shape[:-1])

    @torch.no_grad()
    def init_from(self, frames: torch.Tensor, generator: torch.Generator | None = None) -> None:
        frames = frames.reshape(-1, frames.shape[-1])
        if frames.shape[0] >= self.size:
            pick = torch.randperm(frames.shape[0], generator=generator)[: self.size]
        else:
            pick = torch.randint(frames.shape[0], (self.size,), generator=generator)
        jitter = torch.randn(self.size, frames.shape[1], generator=generator) * (1e-3 * frames.std() + 1e-6)
        self.vectors.copy_(frames[pick] + jitter)
        self.ema_counts.zero_()
        self.ema_sums.zero_()
        self.initialized.fill_(True)

    @torch.no_grad()
    def ema_update(
        self,
        frames: torch.Tensor,
        indices: torch.Tensor,
        decay: float,
        dead_threshold: float = 1e-3,
        generator: torch.Generator | None = None,
    ) -> None:
        frames = frames.reshape(-1, frames.shape[-1]).to(self.vectors.dtype)
        indices = indices.reshape(-1)
        if frames.shape[0] == 0:
            return
        onehot = F.one_hot(indices, self.size).to(frames.dtype)
        self.ema_counts.mul_(decay).add_(onehot.sum(0), alpha=1 - decay)
        self.ema_sums.mul_(decay).add_(onehot.T @ frames, alpha=1 - decay)
        live = self.ema_counts >= dead_threshold
        self.vectors[live] = self.ema_sums[live] / self.ema_counts[live, None]
        dead = torch.nonzero(~live).flatten()
        if dead.numel():
            n = dead.numel()
            if frames.shape[0] >= n:
                pick = torch.randperm(frames.shape[0], generator=generator)[:n]
            else:
                pick = torch.randint(frames.shape[0], (n,), generator=generator)
            jitter = torch.randn(n, frames.shape[1], generator=generator) * (1e-3 * frames.std() + 1e-6)
            self.vectors[dead] = frames[pick] + jitter
            self.ema_sums[dead] = self.vectors[dead] * self.ema_counts[dead, None]


class ResidualVQ(nn.Module):
    def __init__(self, layers: int, size: int, dim: int):
        super().__init__()
        self.layers = nn.ModuleList(Codebook(size, dim) for _ in range(layers))

    @property
    def dim(self) -> int:
        return self.layers[0].vectors.shape[1]

    def forward(self, x: torch.Tensor, generator: torch.Generator | None = None) -> QuantizeResult:
        if x.shape[-1] != self.dim:
            raise ValidationError("feature dimension does not match the RVQ stack")
        if not torch.isfinite(x).all():
            raise ValidationError("invalid features")
        residual = x
        quantized = torch.zeros_like(x)
        idx, norms, inputs = [], [], []
        commit = x.new_zeros(())
        for cb in self.layers:
            if self.training and not bool(cb.initialized):
                cb.init_from(residual.detach(), generator)
            inputs.append(residual.detach())
            k = cb.nearest(residual.detach())
            code = F.embedding(k, cb.vectors)
            commit = commit + F.mse_loss(residual, code.detach())
            residual = residual - code
            quantized = quantized + code
            idx.append(k)
            norms.append(residual.detach().norm(dim=-1))
        return QuantizeResult(torch.stack(idx, -1), quantized, torch.stack(norms, -1), inputs, commit)

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        out = 0
        for r, cb in enumerate(self.layers):
            out = out + F.embedding(indices[..., r], cb.vectors)
        return out

    @torch.no_grad()
    def ema_update(self, result: QuantizeResult, decay: float, dead_threshold: float = 1e-3, generator=None) -> None:
        for r, cb in enumerate(self.layers):
            cb.ema_update(result.layer_inputs[r], result.indices[..., r], decay, dead_threshold, generator)


def rvq_quantize(x, stack: ResidualVQ):
    """Greedy residual quantization of ``x`` (frames x d).

    Returns ``(indices, reconstruction, residual_norms)`` where
    ``residual_norms[:, r]`` is the norm left after layer ``r``.
    """
    x = torch.as_tensor(x, dtype=stack.layers[0].vectors.dtype)
    was_training = stack.training
    stack.eval()
    try:
        with torch.no_grad():
            res = stack(x)
    finally:
        stack.train(was_training)
    return res.indices, res.quantized, res.residual_norms


def rvq_ema_update(stack: ResidualVQ, batch_assignments, decay: float = 0.99, dead_threshold: float = 1e-3, generator=None):
    """``batch_assignments`` is one ``(frames, indices)`` pair per layer."""
    if not 0 <= decay < 1:
        raise ValidationError("decay must be in [0, 1)")
    for cb, (frames, indices) in zip(stack.layers, batch_assignments):
        cb.ema_update(torch.as_tensor(frames, dtype=cb.vectors.dtype), torch.as_tensor(indices), decay, dead_threshold, generator)
    return stack


# --------------------------------------------------------------------------
# encoders / decoder


class AcousticEncoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        layers, c_in = [], 1
        for s, c in zip(cfg.strides, cfg.channels):
            layers += [nn.Conv1d(c_in, c, 2 * s, stride=s, padding=s // 2), nn.ELU()]
            c_in = c
        layers.append(nn.Conv1d(c_in, cfg.dim, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, wave):  # (B, N) -> (B, F, d)
        return self.net(wave[:, None]).transpose(1, 2)


class SemanticEncoder(nn.Module):
    """Fixed cosine-filterbank energies followed by a fixed random projection.

    Everything is a buffer built from ``cfg.semantic_seed``; nothing here is
    ever trained.
    """

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        g = torch.Generator().manual_seed(cfg.semantic_seed)
        n, k = cfg.semantic_filters, cfg.semantic_kernel
        freqs = torch.logspace(math.log10(40.0), math.log10(0.4 * cfg.sample_rate_hz), n, dtype=torch.float64)
        phase = torch.rand(n, 1, generator=g, dtype=torch.float64) * 2 * math.pi
        t = torch.arange(k, dtype=torch.float64) / cfg.sample_rate_hz
        win = torch.hann_window(k, periodic=False, dtype=torch.float64)
        filt = torch.cos(2 * math.pi * freqs[:, None] * t[None] + phase) * win / win.sum()
        proj = torch.randn(cfg.dim, n, generator=g, dtype=torch.float64) / math.sqrt(n)
        self.register_buffer("filters", filt[:, None].float())
        self.register_buffer("projection", proj.float())
        self.stride = cfg.semantic_stride
        self.pool = cfg.hop_samples // cfg.semantic_stride
        self.kernel = k

    def forward(self, wave):
        x = F.pad(wave[:, None], (self.kernel // 2, self.kernel // 2 - 1))
        y = F.conv1d(x, self.filters, stride=self.stride)
        feats = torch.log1p(100.0 * y.abs())
        feats = F.avg_pool1d(feats, self.pool, self.pool)  # (B, n, F)
        return torch.einsum("dn,bnf->bfd", self.projection, feats)


class ResidualUnit(nn.Module):
    def __init__(self, channels: int, dilation: int):
        super().__init__()
        self.conv = nn.Conv1d(channels, channels, 3, padding=dilation, dilation=dilation)
        self.proj = nn.Conv1d(channels, channels, 1)

    def forward(self, x):
        return x + self.proj(F.elu(self.conv(F.elu(x))))


class Decoder(nn.Module):
    """Transposed-convolution upsampler whose last stage is an inverse STFT.

    Latents at the codec frame rate are upsampled to the STFT frame rate,
    mapped to per-bin log-magnitude and phase, then overlap-added.
    """

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        c = cfg.decoder_channels
        layers = [nn.Conv1d(2 * cfg.dim, c, 7, padding=3), ResidualUnit(c, 1), ResidualUnit(c, 3)]
        for s in cfg.decoder_upsample:
            layers += [nn.ELU(), nn.ConvTranspose1d(c, c, 2 * s, stride=s, padding=s // 2), ResidualUnit(c, 1), ResidualUnit(c, 3)]
        layers.append(nn.ELU())
        self.net = nn.Sequential(*layers)
        self.bins = cfg.istft_fft // 2 + 1
        self.head = nn.Conv1d(c, 2 * self.bins, 1)
        with torch.no_grad():
            self.head.bias[: self.bins].fill_(-6.0)  # start near silence
        self.n_fft = cfg.istft_fft
        self.hop = cfg.istft_hop
        self.register_buffer("window", torch.hann_window(cfg.istft_fft))

    def forward(self, z):  # (B, F, 2d) -> (B, F * hop)
        frames = z.shape[1]
        h = self.head(self.net(z.transpose(1, 2)))
        logmag, phase = h[:, : self.bins], h[:, self.bins :]
        mag = torch.exp(logmag.clamp(max=6.0))
        spec = torch.polar(mag, phase)
        length = frames * self.hop * (h.shape[-1] // frames)
        return torch.istft(spec, self.n_fft, self.hop, window=self.window, center=True, length=length)


class CodecModel(nn.Module):
    def __init__(self, cfg: CodecConfig | None = None):
        super().__init__()
        self.cfg = cfg or CodecConfig()
        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(self.cfg.seed, "codec-init"))
            self.acoustic_encoder = AcousticEncoder(self.cfg)
            self.semantic_encoder = SemanticEncoder(self.cfg)
            self.acoustic_rvq = ResidualVQ(self.cfg.rvq_layers, self.cfg.codebook_size, self.cfg.dim)
            self.semantic_rvq = ResidualVQ(self.cfg.rvq_layers, self.cfg.codebook_size, self.cfg.dim)
            self.decoder = Decoder(self.cfg)

    def pad(self, wave: torch.Tensor) -> torch.Tensor:
        n = wave.shape[-1]
        if n == 0:
            raise ValidationError("empty input")
        frames = self.cfg.frames_for(n)
        return F.pad(wave, (0, frames * self.cfg.hop_samples - n))

    def features(self, wave: torch.Tensor):
        wave = self.pad(wave)
        return self.acoustic_encoder(wave), self.semantic_encoder(wave)

    def forward(self, wave: torch.Tensor, generator=None):
        """Training/analysis pass: returns reconstruction and both quantizer results."""
        za, zs = self.features(wave)
        qa = self.acoustic_rvq(za, generator)
        qs = self.semantic_rvq(zs, generator)
        za_st = za + (qa.quantized - za).detach()
        recon = self.decoder(torch.cat([za_st, qs.quantized.detach()], -1))
        return recon, qa, qs

    @torch.no_grad()
    def encode_tensor(self, wave: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if not torch.isfinite(wave).all():
            raise ValidationError("invalid sample")
        za, zs = self.features(wave)
        self.acoustic_rvq.eval()
        self.semantic_rvq.eval()
        return self.acoustic_rvq(za).indices, self.semantic_rvq(zs).indices

    @torch.no_grad()
    def decode_tensor(self, acoustic: torch.Tensor, semantic: torch.Tensor) -> torch.Tensor:
        if acoustic.shape[-2] != semantic.shape[-2]:
            raise ValidationError("stream misalignment")
        z = torch.cat([self.acoustic_rvq.lookup(acoustic), self.semantic_rvq.lookup(semantic)], -1)
        return self.decoder(z)

    def encode(self, audio: AudioBuffer) -> tuple[TokenGrid, TokenGrid]:
        if audio.sample_rate_hz != self.cfg.sample_rate_hz:
            raise ValidationError("resample required")
        wave = torch.as_tensor(np.asarray(audio.samples, dtype=np.float32))[None]
        a, s = self.encode_tensor(wave)
        kw = dict(frame_rate_hz=self.cfg.frame_rate_hz, codebook_size=self.cfg.codebook_size)
        return TokenGrid(a[0].numpy(), "acoustic", **kw), TokenGrid(s[0].numpy(), "semantic", **kw)

    def decode(self, acoustic: TokenGrid, semantic: TokenGrid) -> AudioBuffer:
        if acoustic.frames != semantic.frames:
            raise ValidationError("stream misalignment")
        K = self.cfg.codebook_size
        for g in (acoustic, semantic):
            if g.layers != self.cfg.rvq_layers:
                raise ValidationError("token grid layer count does not match codec")
            if g.indices.size and (g.indices.min() < 0 or g.indices.max() >= K):
                raise ValidationError("token index out of range")
        a = torch.as_tensor(acoustic.indices)[None]
        s = torch.as_tensor(semantic.indices)[None]
        wave = self.decode_tensor(a, s)[0]
        return AudioBuffer(wave.numpy().astype(np.float32), self.cfg.sample_rate_hz)

    def roundtrip(self, audio: AudioBuffer) -> AudioBuffer:
        a, s = self.encode(audio)
        out = self.decode(a, s)
        return AudioBuffer(out.samples[: len(audio)], out.sample_rate_hz)

    def digest(self) -> str:
        return checkpoint.module_digest(self)


def codec_config_dict(cfg: CodecConfig) -> dict:
    d = asdict(cfg)
    d["strides"] = list(cfg.strides)
    d["channels"] = list(cfg.channels)
    return d


def save_codec(model: CodecModel, path, **extra) -> str:
    return checkpoint.save_container(path, model.state_dict(), {"codec": codec_config_dict(model.cfg)}, kind="codec", **extra)


def load_codec(path) -> CodecModel:
    tensors, manifest = checkpoint.load_container(path)
    cfg = CodecConfig(**manifest["config"]["codec"])
    model = CodecModel(cfg)
    model.load_state_dict(checkpoint.subset(tensors, "codec.") if any(k.startswith("codec.") for k in tensors) else tensors)
    model.eval()
    return model


# --------------------------------------------------------------------------
# training


def _crop_batch(clips: Sequence[np.ndarray], n: int, crop: int, rng: np.random.Generator) -> torch.Tensor:
    out = np.zeros((n, crop), dtype=np.float32)
    for i in range(n):
        x = clips[rng.integers(len(clips))]
        if len(x) > crop:
            o = rng.integers(len(x) - crop + 1)
            out[i] = x[o : o + crop]
        else:
            out[i, : len(x)] = x
    return torch.from_numpy(out)


def codec_loss(model: CodecModel, wave: torch.Tensor, generator=None):
    cfg = model.cfg
    recon, qa, qs = model(wave, generator)
    recon = recon[:, : wave.shape[1]]
    mel_r = torch_log_mel(recon, cfg.sample_rate_hz, cfg.n_mels, cfg.fft_size, cfg.mel_hop)
    mel_t = torch_log_mel(wave, cfg.sample_rate_hz, cfg.n_mels, cfg.fft_size, cfg.mel_hop)
    mel = (mel_r - mel_t).abs().mean()
    l2 = F.mse_loss(recon, wave)
    loss = mel + cfg.waveform_l2_weight * l2 + cfg.commitment_weight * qa.commitment
    parts = {"mel_l1": float(mel.detach()), "wave_l2": float(l2.detach()), "commit": float(qa.commitment.detach())}
    return loss, parts, qa, qs


def validation_mel_l1(model: CodecModel, clips: Sequence[AudioBuffer]) -> float:
    model.eval()
    return float(np.mean([mel_l1(c, model.roundtrip(c), model.cfg.n_mels, model.cfg.fft_size, model.cfg.mel_hop) for c in clips]))


def train_codec(
    dataset: Sequence[AudioBuffer],
    cfg: CodecConfig | None = None,
    val: Sequence[AudioBuffer] | None = None,
    out_dir=None,
    model: CodecModel | None = None,
) -> tuple[CodecModel, dict]:
    """Train a codec; returns the best-on-validation model and a history dict."""
    cfg = cfg or CodecConfig()
    model = model or CodecModel(cfg)
    for a in dataset:
        if a.sample_rate_hz != cfg.sample_rate_hz:
            raise ValidationError("resample required")
    if val is None:
        n_val = max(1, int(round(len(dataset) * cfg.val_fraction))) if len(dataset) > 1 else 0
        train_set, val = list(dataset[: len(dataset) - n_val]), list(dataset[len(dataset) - n_val :])
    else:
        train_set = list(dataset)
    history = {"steps": [], "val_mel_l1": [], "best_val_mel_l1": None, "seconds": 0.0}
    if cfg.epochs <= 0 or not train_set:
        model.eval()
        return model, history

    t0 = time.time()
    clips = [np.asarray(a.samples, dtype=np.float32) for a in train_set]
    crop = cfg.frames_for(int(cfg.crop_s * cfg.sample_rate_hz)) * cfg.hop_samples
    steps_per_epoch = max(1, len(clips) // cfg.batch_size)
    rng = numpy_rng(cfg.seed, "codec-batches")
    gen = torch_generator(cfg.seed, "codec-reseed")
    params = list(model.acoustic_encoder.parameters()) + list(model.decoder.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.8, 0.99))
    total = cfg.epochs * steps_per_epoch
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / 50) * (0.1 ** (s / total)))

    best = validation_mel_l1(model, val) if val else math.inf
    history["initial_val_mel_l1"] = best
    best_state = copy.deepcopy(model.state_dict())
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        model.semantic_encoder.eval()
        for _ in range(steps_per_epoch):
            wave = _crop_batch(clips, cfg.batch_size, crop, rng)
            loss, parts, qa, qs = codec_loss(model, wave, gen)
            if not torch.isfinite(loss):
                raise TrainingDiverged("codec training diverged")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, 1.0)
            opt.step()
            sched.step()
            model.acoustic_rvq.ema_update(qa, cfg.ema_decay, cfg.dead_code_threshold, gen)
            model.semantic_rvq.ema_update(qs, cfg.ema_decay, cfg.dead_code_threshold, gen)
            history["steps"].append({"step": step, "loss": float(loss.detach()), **parts})
            step += 1
        if val:
            v = validation_mel_l1(model, val)
            history["val_mel_l1"].append(v)
            log.info("codec epoch %d: loss %.4f val mel-L1 %.4f", epoch, float(loss.detach()), v)
            if v < best:
                best = v
                best_state = copy.deepcopy(model.state_dict())
        else:
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    history["best_val_mel_l1"] = best
    history["seconds"] = time.time() - t0
    if out_dir is not None:
        save_codec(model, out_dir, history={k: v for k, v in history.items() if k != "steps"})
    return model, history


# --------------------------------------------------------------------------
# token dump: 8-byte header (magic, frames, R, K) as little-endian uint16, then frames x R uint16

TOKEN_MAGIC = 0x4B54  # "TK"


def write_token_dump(path, grid: TokenGrid, codebook_size: int) -> None:
    idx = np.asarray(grid.indices)
    if idx.shape[0] > 65535 or idx.shape[1] > 65535:
        raise ValidationError("token grid too large for dump format")
    header = struct.pack("<4H", TOKEN_MAGIC, idx.shape[0], idx.shape[1], codebook_size)
    Path(path).write_bytes(header + idx.astype("<u2").tobytes())


def read_token_dump(path, stream: str = "acoustic", frame_rate_hz: float = 12.5) -> TokenGrid:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValidationError("unsupported format: short token dump")
    magic, frames, R, K = struct.unpack("<4H", raw[:8])
    if magic != TOKEN_MAGIC or len(raw) != 8 + 2 * frames * R:
        raise ValidationError("unsupported format: bad token dump")
    idx = np.frombuffer(raw[8:], dtype="<u2").reshape(frames, R).astype(np.int64)
    return TokenGrid(idx, stream, frame_rate_hz, K)
