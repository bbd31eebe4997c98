"""Decoder-only token model (RMSNorm pre-norm, rotary positions, SwiGLU).

Every sequence position carries R codec indices. The input embedding is the
sum of R per-layer tables plus a stream-type embedding; the output is R
parallel classification heads over the extended vocabulary ``K + 4``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CacheInvalid, ValidationError
from .layers import RMSNorm, apply_rotary, attention
from .seqlayout import SPECIAL, vocab_size


@dataclass
class LmConfig:
    layers: int = 4
    heads: int = 8
    hidden: int = 256
    dropout: float = 0.1
    rvq_layers: int = 4
    codebook_size: int = 128
    max_positions: int = 2048
    ffn_hidden: int = 0  # 0 -> LLaMA-style 8/3 * hidden rounded up to a multiple of 32
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValidationError("lm.hidden must be divisible by lm.heads")
        if (self.hidden // self.heads) % 2:
            raise ValidationError("lm head dimension must be even for rotary embedding")
        if self.rvq_layers < 1 or self.codebook_size < 2:
            raise ValidationError("lm.rvq_layers >= 1 and lm.codebook_size >= 2 required")
        if not 0 <= self.dropout < 1:
            raise ValidationError("lm.dropout must be in [0, 1)")

    @property
    def vocab(self) -> int:
        return vocab_size(self.codebook_size)

    @property
    def ffn_dim(self) -> int:
        if self.ffn_hidden:
            return self.ffn_hidden
        return 32 * -(-int(8 * self.hidden / 3) // 32)


@dataclass
class KvCache:
    """Keys/values per decoder layer, each (B, heads, n, head_dim).

    Appending returns a new cache object; earlier snapshots stay valid, which
    is what the prefix-only ablation relies on.
    """

    keys: list[torch.Tensor] = field(default_factory=list)
    values: list[torch.Tensor] = field(default_factory=list)
    positions: torch.Tensor = field(default_factory=lambda: torch.zeros(0, dtype=torch.long))
    next_position: int = 0

    @property
    def current_len(self) -> int:
        return int(self.positions.numel())


class DecoderLayer(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        h = cfg.hidden
        self.heads = cfg.heads
        self.rope_base = cfg.rope_base
        self.attn_norm = RMSNorm(h)
        self.wq = nn.Linear(h, h, bias=False)
        self.wk = nn.Linear(h, h, bias=False)
        self.wv = nn.Linear(h, h, bias=False)
        self.wo = nn.Linear(h, h, bias=False)
        self.ffn_norm = RMSNorm(h)
        self.w_gate = nn.Linear(h, cfg.ffn_dim, bias=False)
        self.w_up = nn.Linear(h, cfg.ffn_dim, bias=False)
        self.w_down = nn.Linear(cfg.ffn_dim, h, bias=False)
        self.drop = nn.Dropout(cfg.dropout)
        self.p = cfg.dropout

    def forward(self, x, positions, key_positions, past_k=None, past_v=None):
        B, n, H = x.shape
        hd = H // self.heads
        y = self.attn_norm(x)
        q = self.wq(y).view(B, n, self.heads, hd).transpose(1, 2)
        k = self.wk(y).view(B, n, self.heads, hd).transpose(1, 2)
        v = self.wv(y).view(B, n, self.heads, hd).transpose(1, 2)
        q = apply_rotary(q, positions, self.rope_base)
        k = apply_rotary(k, positions, self.rope_base)
        if past_k is not None:
            k = torch.cat([past_k, k], 2)
            v = torch.cat([past_v, v], 2)
        mask = key_positions[None, :] <= positions[:, None]
        a = attention(q, k, v, mask, self.p, self.training)
        x = x + self.drop(self.wo(a.transpose(1, 2).reshape(B, n, H)))
        y = self.ffn_norm(x)
        x = x + self.drop(self.w_down(F.silu(self.w_gate(y)) * self.w_up(y)))
        return x, k, v


class SeparationLM(nn.Module):
    def __init__(self, cfg: LmConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or LmConfig()
        V, H, R = cfg.vocab, cfg.hidden, cfg.rvq_layers
        self.token_tables = nn.ModuleList(nn.Embedding(V, H) for _ in range(R))
        self.stream_embed = nn.Embedding(2, H)
        self.mix_embed = nn.Parameter(torch.zeros(H))
        self.blocks = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.layers))
        self.norm = RMSNorm(H)
        self.heads = nn.Linear(H, R * V)  # R independent affine maps, stacked
        self.emb_drop = nn.Dropout(cfg.dropout)
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Embedding)):
                nn.init.normal_(m.weight, std=0.02)
            if isinstance(m, nn.Linear) and m.bias is not None:
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.mix_embed, std=0.02)
        for b in self.blocks:
            nn.init.normal_(b.wo.weight, std=0.02 / (2 * self.cfg.layers) ** 0.5)
            nn.init.normal_(b.w_down.weight, std=0.02 / (2 * self.cfg.layers) ** 0.5)

    # ------------------------------------------------------------------ embeddings

    def embed_tokens(self, tokens: torch.Tensor, streams: torch.Tensor) -> torch.Tensor:
        """tokens (B, n, R) long, streams (B, n) in {0: acoustic, 1: semantic, 2: special}."""
        if tokens.shape[-1] != self.cfg.rvq_layers:
            raise ValidationError("token positions must carry one index per RVQ layer")
        e = sum(table(tokens[..., r]) for r, table in enumerate(self.token_tables))
        is_tok = streams != SPECIAL
        s = self.stream_embed(torch.where(is_tok, streams, torch.zeros_like(streams)))
        return e + s * is_tok[..., None].to(e.dtype)

    def sequence_embeddings(self, prefix: torch.Tensor, tokens: torch.Tensor, streams: torch.Tensor) -> torch.Tensor:
        B = prefix.shape[0]
        mix = self.mix_embed.to(prefix.dtype).expand(B, 1, -1)
        return torch.cat([mix, prefix, self.embed_tokens(tokens, streams)], 1)

    def logits_from_hidden(self, h: torch.Tensor) -> torch.Tensor:
        y = self.heads(self.norm(h))
        return y.view(*h.shape[:-1], self.cfg.rvq_layers, self.cfg.vocab)

    # ------------------------------------------------------------------ full pass

    def run(self, embeds: torch.Tensor, cache: KvCache | None = None) -> tuple[torch.Tensor, KvCache]:
        """Process ``embeds`` (B, n, H) after whatever ``cache`` already holds."""
        B, n, H = embeds.shape
        if H != self.cfg.hidden:
            raise CacheInvalid("cache invalid: hidden size mismatch")
        cache = cache or KvCache()
        if cache.keys:
            if len(cache.keys) != len(self.blocks):
                raise CacheInvalid("cache invalid: layer count mismatch")
            k0 = cache.keys[0]
            if k0.shape[0] != B or k0.shape[1] != self.cfg.heads or k0.shape[3] != H // self.cfg.heads or k0.dtype != embeds.dtype:
                raise CacheInvalid("cache invalid")
        start = cache.next_position
        if start + n > self.cfg.max_positions:
            raise ValidationError("sequence too long")
        positions = torch.arange(start, start + n)
        key_positions = torch.cat([cache.positions, positions])
        x = self.emb_drop(embeds)
        keys, values = [], []
        for i, block in enumerate(self.blocks):
            pk = cache.keys[i] if cache.keys else None
            pv = cache.values[i] if cache.values else None
            x, k, v = block(x, positions, key_positions, pk, pv)
            keys.append(k)
            values.append(v)
        return x, KvCache(keys, values, key_positions, start + n)

    def forward(self, prefix: torch.Tensor, tokens: torch.Tensor, streams: torch.Tensor) -> torch.Tensor:
        """Logits (B, 1 + P + n, R, vocab) over ``[MIX, prefix, tokens]``."""
        h, _ = self.run(self.sequence_embeddings(prefix, tokens, streams))
        return self.logits_from_hidden(h)

    # ------------------------------------------------------------------ incremental

    def prefill(self, prefix: torch.Tensor) -> tuple[torch.Tensor, KvCache]:
        B = prefix.shape[0]
        embeds = torch.cat([self.mix_embed.to(prefix.dtype).expand(B, 1, -1), prefix], 1)
        h, cache = self.run(embeds)
        return self.logits_from_hidden(h[:, -1]), cache

    def forward_incremental(self, cache: KvCache, new_embedding: torch.Tensor) -> tuple[torch.Tensor, KvCache]:
        """One new position (B, 1, H) or (B, H); returns (B, R, vocab) logits and the extended cache."""
        if new_embedding.dim() == 2:
            new_embedding = new_embedding[:, None]
        if new_embedding.shape[1] != 1:
            raise CacheInvalid("cache invalid: expected a single new position")
        h, cache = self.run(new_embedding, cache)
        return self.logits_from_hidden(h[:, -1]), cache

    def step_tokens(self, cache: KvCache, tokens: torch.Tensor, stream: int) -> tuple[torch.Tensor, KvCache]:
        """Feed one position given its (B, R) indices and stream tag."""
        streams = torch.full(tokens.shape[:1] + (1,), stream, dtype=torch.long)
        return self.forward_incremental(cache, self.embed_tokens(tokens[:, None], streams))
