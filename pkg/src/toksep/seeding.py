"""Counter-based seed splitting: every random stream is a pure function of
the run seed and a component key."""

from __future__ import annotations

import os
import zlib

import numpy as np
import torch

ENV_SEED = "TOKSEP_SEED"


def _key_words(keys) -> list[int]:
    out = []
    for k in keys:
        if isinstance(k, str):
            out.append(zlib.crc32(k.encode()))
        else:
            out.append(int(k) & 0xFFFFFFFF)
    return out


def derive_seed(seed: int, *keys) -> int:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(_key_words(keys)))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return (int(lo) | (int(hi) << 32)) & (2**63 - 1)


def numpy_rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))


def torch_generator(seed: int, *keys) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *keys))
    return g


def seed_from_env(default: int) -> int:
    v = os.environ.get(ENV_SEED)
    return int(v) if v not in (None, "") else default
