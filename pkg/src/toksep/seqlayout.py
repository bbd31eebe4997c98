"""Token-sequence algebra for the separation LM.

Layout of one training/inference sequence (positions along one axis)::

    input : [MIX, F_1 .. F_P, S, c1, S, c2, S, c3, S, c4]
    target:                  [c1, E, c2, E, c3, E, c4, E]

where each ``ck`` is an interleaved acoustic/semantic track sequence and the
target at step ``t`` is predicted from input position ``P + 1 + t``.
A token position carries one index per RVQ layer; special positions repeat
the reserved index on every layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from . import TRACKS
from .errors import ValidationError

ACOUSTIC, SEMANTIC, SPECIAL = 0, 1, 2


class SpecialToken(IntEnum):
    MIX = 0
    START = 1
    END = 2
    PAD = 3

    def index(self, codebook_size: int) -> int:
        return codebook_size + int(self)


def vocab_size(codebook_size: int) -> int:
    return codebook_size + len(SpecialToken)


@dataclass(frozen=True)
class TokenGrid:
    indices: np.ndarray  # frames x R
    stream: str = "acoustic"
    frame_rate_hz: float = 12.5
    codebook_size: int | None = None

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 2:
            raise ValidationError("token grid must be frames x layers")
        if self.stream not in ("acoustic", "semantic"):
            raise ValidationError(f"unknown stream {self.stream!r}")
        if idx.size and (idx.min() < 0 or (self.codebook_size is not None and idx.max() >= self.codebook_size)):
            raise ValidationError("token index out of range")
        object.__setattr__(self, "indices", idx)

    @property
    def frames(self) -> int:
        return self.indices.shape[0]

    @property
    def layers(self) -> int:
        return self.indices.shape[1]


@dataclass(frozen=True)
class TrackSequence:
    """Interleaved positions ``[a0, s0, a1, s1, ...]``, shape (positions, R)."""

    tokens: np.ndarray
    track: str | None = None

    def __post_init__(self):
        tok = np.asarray(self.tokens, dtype=np.int64)
        if tok.ndim != 2:
            raise ValidationError("track sequence must be positions x layers")
        object.__setattr__(self, "tokens", tok)

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def streams(self) -> np.ndarray:
        return np.arange(len(self)) % 2


@dataclass(frozen=True)
class PromptLayout:
    input_ids: np.ndarray  # (1 + P + L, R); prefix rows hold the PAD placeholder
    input_streams: np.ndarray  # (1 + P + L,)
    target_ids: np.ndarray  # (L, R)
    prefix_len: int
    boundaries: list[tuple[int, int]] = field(default_factory=list)  # half-open input span of each track body
    codebook_size: int = 0

    @property
    def target_len(self) -> int:
        return self.target_ids.shape[0]

    @property
    def token_ids(self) -> np.ndarray:
        """Input rows after the mixture prefix, i.e. what the token embedding sees."""
        return self.input_ids[1 + self.prefix_len :]

    @property
    def token_streams(self) -> np.ndarray:
        return self.input_streams[1 + self.prefix_len :]

    def supervised_position(self, t: int) -> int:
        return self.prefix_len + 1 + t


def interleave(acoustic: TokenGrid, semantic: TokenGrid) -> TrackSequence:
    a = np.asarray(acoustic.indices)
    s = np.asarray(semantic.indices)
    if a.shape[0] != s.shape[0]:
        raise ValidationError("stream misalignment")
    if a.shape[1] != s.shape[1]:
        raise ValidationError("stream misalignment: layer counts differ")
    out = np.empty((2 * a.shape[0], a.shape[1]), dtype=np.int64)
    out[0::2] = a
    out[1::2] = s
    return TrackSequence(out)


def deinterleave(
    seq: TrackSequence, frame_rate_hz: float = 12.5, codebook_size: int | None = None
) -> tuple[TokenGrid, TokenGrid]:
    tok = seq.tokens
    if len(tok) % 2:
        raise ValidationError("truncated sequence")
    return (
        TokenGrid(tok[0::2], "acoustic", frame_rate_hz, codebook_size),
        TokenGrid(tok[1::2], "semantic", frame_rate_hz, codebook_size),
    )


def special_row(kind: SpecialToken, codebook_size: int, layers: int) -> np.ndarray:
    return np.full((1, layers), kind.index(codebook_size), dtype=np.int64)


def assemble_prompt(track_seqs: Sequence[TrackSequence], prefix_len: int, codebook_size: int) -> PromptLayout:
    if len(track_seqs) != len(TRACKS):
        raise ValidationError("expected four tracks")
    names = [t.track for t in track_seqs]
    if any(n is not None for n in names) and tuple(names) != TRACKS:
        raise ValidationError(f"track order must be {', '.join(TRACKS)}; got {names}")
    if prefix_len < 0:
        raise ValidationError("prefix_len must be >= 0")
    lengths = {len(t) for t in track_seqs}
    layers = {t.tokens.shape[1] for t in track_seqs}
    if len(lengths) != 1 or len(layers) != 1:
        raise ValidationError("tracks must share length and layer count")
    R = layers.pop()
    for t in track_seqs:
        if t.tokens.size and (t.tokens.min() < 0 or t.tokens.max() >= codebook_size):
            raise ValidationError("track tokens must be codec indices")

    start = special_row(SpecialToken.START, codebook_size, R)
    end = special_row(SpecialToken.END, codebook_size, R)
    head = np.concatenate(
        [special_row(SpecialToken.MIX, codebook_size, R), np.repeat(special_row(SpecialToken.PAD, codebook_size, R), prefix_len, 0)]
    )
    rows, streams, targets, bounds = [head], [np.full(1 + prefix_len, SPECIAL)], [], []
    pos = 1 + prefix_len
    for t in track_seqs:
        rows += [start, t.tokens]
        streams += [np.array([SPECIAL]), t.streams]
        targets += [t.tokens, end]
        bounds.append((pos + 1, pos + 1 + len(t)))
        pos += 1 + len(t)
    return PromptLayout(
        input_ids=np.concatenate(rows),
        input_streams=np.concatenate(streams).astype(np.int64),
        target_ids=np.concatenate(targets),
        prefix_len=prefix_len,
        boundaries=bounds,
        codebook_size=codebook_size,
    )


def split_tracks(target_ids: np.ndarray, codebook_size: int) -> list[TrackSequence]:
    target_ids = np.asarray(target_ids, dtype=np.int64)
    end_idx = SpecialToken.END.index(codebook_size)
    is_end = target_ids == end_idx
    if np.any(is_end.any(axis=1) != is_end.all(axis=1)):
        raise ValidationError("malformed generation: partial END position")
    ends = np.flatnonzero(is_end.all(axis=1))
    if len(ends) != len(TRACKS) or ends[-1] != len(target_ids) - 1:
        raise ValidationError("malformed generation")
    out, begin = [], 0
    for name, e in zip(TRACKS, ends):
        out.append(TrackSequence(target_ids[begin:e], name))
        begin = e + 1
    return out


def expected_target_len(frames_per_track: int) -> int:
    return len(TRACKS) * (2 * frames_per_track + 1)
