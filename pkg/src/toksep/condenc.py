"""Conditional encoder: log-Mel -> strided downsampler -> Conformer -> linear adapter."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError
from .layers import apply_rotary, attention

# fixed affine normalisation of log-Mel input (floor is log(1e-5) ~ -11.5)
MEL_CENTER = -5.0
MEL_SCALE = 5.0


@dataclass
class ConformerConfig:
    n_mels: int = 120
    fft_size: int = 2048
    mel_hop: int = 960
    layers: int = 2
    heads: int = 4
    model_dim: int = 128
    conv_kernel: int = 31
    ff_expansion: int = 4
    dropout: float = 0.1
    prefix_downsample: int = 4
    lm_hidden: int = 256

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValidationError("conformer.model_dim must be divisible by conformer.heads")
        if (self.model_dim // self.heads) % 2:
            raise ValidationError("conformer head dimension must be even for rotary embedding")
        if self.conv_kernel % 2 == 0:
            raise ValidationError("conformer.conv_kernel must be odd")
        if self.prefix_downsample < 1:
            raise ValidationError("conformer.prefix_downsample must be >= 1")

    def prefix_len(self, mel_frames: int) -> int:
        return -(-mel_frames // self.prefix_downsample)


class FeedForward(nn.Module):
    def __init__(self, dim, expansion, dropout):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.up = nn.Linear(dim, dim * expansion)
        self.down = nn.Linear(dim * expansion, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.drop(self.down(self.drop(F.silu(self.up(self.norm(x))))))


class RotarySelfAttention(nn.Module):
    def __init__(self, dim, heads, dropout):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)
        self.p = dropout

    def forward(self, x):
        B, T, D = x.shape
        q, k, v = self.qkv(self.norm(x)).view(B, T, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        pos = torch.arange(T)
        q, k = apply_rotary(q, pos), apply_rotary(k, pos)
        y = attention(q, k, v, None, self.p, self.training)
        return self.drop(self.out(y.transpose(1, 2).reshape(B, T, D)))


class ConvModule(nn.Module):
    def __init__(self, dim, kernel, dropout):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.pointwise_in = nn.Conv1d(dim, 2 * dim, 1)
        self.depthwise = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.mid_norm = nn.LayerNorm(dim)
        self.pointwise_out = nn.Conv1d(dim, dim, 1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        y = F.glu(self.pointwise_in(self.norm(x).transpose(1, 2)), dim=1)
        y = self.depthwise(y)
        y = F.silu(self.mid_norm(y.transpose(1, 2))).transpose(1, 2)
        return self.drop(self.pointwise_out(y).transpose(1, 2))


class ConformerBlock(nn.Module):
    def __init__(self, cfg: ConformerConfig):
        super().__init__()
        d = cfg.model_dim
        self.ff1 = FeedForward(d, cfg.ff_expansion, cfg.dropout)
        self.attn = RotarySelfAttention(d, cfg.heads, cfg.dropout)
        self.conv = ConvModule(d, cfg.conv_kernel, cfg.dropout)
        self.ff2 = FeedForward(d, cfg.ff_expansion, cfg.dropout)
        self.norm = nn.LayerNorm(d)

    def forward(self, x):
        x = x + 0.5 * self.ff1(x)
        x = x + self.attn(x)
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.norm(x)


class ConditionalEncoder(nn.Module):
    def __init__(self, cfg: ConformerConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ConformerConfig()
        s = cfg.prefix_downsample
        self.downsample = nn.Conv1d(cfg.n_mels, cfg.model_dim, s, stride=s)
        self.blocks = nn.ModuleList(ConformerBlock(cfg) for _ in range(cfg.layers))
        self.adapter = nn.Linear(cfg.model_dim, cfg.lm_hidden)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """(B, frames, n_mels) log-Mel -> (B, ceil(frames / downsample), lm_hidden)."""
        if mel.shape[-1] != self.cfg.n_mels:
            raise ValidationError(f"expected {self.cfg.n_mels} mel bands, got {mel.shape[-1]}")
        if mel.shape[1] < 1:
            raise ValidationError("empty input")
        if not torch.isfinite(mel).all():
            raise ValidationError("invalid features")
        x = (mel - MEL_CENTER) / MEL_SCALE
        s = self.cfg.prefix_downsample
        pad = (-x.shape[1]) % s
        x = F.pad(x.transpose(1, 2), (0, pad))
        x = self.downsample(x).transpose(1, 2)
        for block in self.blocks:
            x = block(x)
        return self.adapter(x)


def encode_mixture(mel, encoder: ConditionalEncoder) -> torch.Tensor:
    """Eval-mode prefix for one mixture; ``mel`` is MelFeatures or a (frames, n_mels) array."""
    values = getattr(mel, "values", mel)
    x = torch.as_tensor(values, dtype=next(encoder.parameters()).dtype)[None]
    was = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            return encoder(x)[0]
    finally:
        encoder.train(was)
