"""Run configuration: one JSON document mirroring every component config.

Unknown keys are rejected with the dotted field name; flags given on the
command line are applied on top of the file (flags win).
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .codec import CodecConfig
from .condenc import ConformerConfig
from .errors import ValidationError
from .lm import LmConfig


@dataclass
class TrainConfig:
    lr: float = 5e-4
    warmup_steps: int = 100
    decay: float = 0.999995
    epochs: int = 10
    max_steps: int = 0  # 0 -> epochs * steps_per_epoch
    batch_size: int = 4
    segment_s: float = 2.0
    label_smoothing: float = 0.1
    rvq_loss_weights: list[float] | None = None  # None -> [2, 1, ..., 1]
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.95)
    grad_clip: float = 1.0
    augment: bool = True
    random_crop: bool = True
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not 0 <= self.label_smoothing < 1:
            raise ValidationError("train.label_smoothing must be in [0, 1)")
        if self.rvq_loss_weights is not None:
            self.rvq_loss_weights = [float(w) for w in self.rvq_loss_weights]
            if not self.rvq_loss_weights or min(self.rvq_loss_weights) <= 0:
                raise ValidationError("train.rvq_loss_weights must all be > 0")
        if self.lr <= 0 or self.warmup_steps < 0 or not 0 < self.decay <= 1:
            raise ValidationError("train.lr > 0, train.warmup_steps >= 0, 0 < train.decay <= 1 required")
        if self.batch_size < 1 or self.segment_s <= 0:
            raise ValidationError("train.batch_size >= 1 and train.segment_s > 0 required")

    def loss_weights(self, rvq_layers: int) -> list[float]:
        w = self.rvq_loss_weights
        if w is None:
            return [2.0] + [1.0] * (rvq_layers - 1)
        if len(w) < rvq_layers:
            # shorter schedules are padded with 1, e.g. [8,4,3,2,2,2,2,2] on 16 layers
            w = list(w) + [1.0] * (rvq_layers - len(w))
        return list(w[:rvq_layers])


@dataclass
class GenerationConfig:
    mode: str = "greedy"
    temperature: float = 1.0
    top_k: int = 0
    enforce_length: bool = True
    crossfade_s: float = 0.25
    preserve_cache: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "sampled"):
            raise ValidationError("generation.mode must be 'greedy' or 'sampled'")
        if self.mode == "sampled" and self.temperature <= 0:
            raise ValidationError("generation.temperature must be > 0 when sampling")


@dataclass
class RunConfig:
    seed: int = 0
    codec: CodecConfig = field(default_factory=CodecConfig)
    conformer: ConformerConfig = field(default_factory=ConformerConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)

    def __post_init__(self):
        if self.lm.rvq_layers != self.codec.rvq_layers or self.lm.codebook_size != self.codec.codebook_size:
            raise ValidationError("lm.rvq_layers/codebook_size must match codec.rvq_layers/codebook_size")
        if self.conformer.lm_hidden != self.lm.hidden:
            raise ValidationError("conformer.lm_hidden must equal lm.hidden")

    def to_dict(self) -> dict:
        return _to_jsonable(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data or {}, "")


_SECTIONS = {
    "codec": CodecConfig,
    "conformer": ConformerConfig,
    "lm": LmConfig,
    "train": TrainConfig,
    "generation": GenerationConfig,
}


def _to_jsonable(x):
    if isinstance(x, dict):
        return {k: _to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_to_jsonable(v) for v in x]
    return x


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ValidationError(f"config section {path or '<root>'} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        dotted = f"{path}{key}"
        if key not in names:
            raise ValidationError(f"unknown config field: {dotted}")
        if cls is RunConfig and key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, dotted + ".")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ValidationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid config in {path or '<root>'}: {exc}") from exc


def load_config(path=None, overrides: dict | None = None, base: dict | None = None) -> RunConfig:
    """Read a JSON config (optional) and apply dotted overrides such as ``{"train.lr": 1e-3}``.

    ``base`` (e.g. the config stored in a checkpoint) is used when no path is given.
    """
    data: dict = json.loads(Path(path).read_text()) if path else copy.deepcopy(base or {})
    for dotted, value in (overrides or {}).items():
        node = data
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return RunConfig.from_dict(data)


def full_scale_config() -> RunConfig:
    """Full-scale published values; valid as a config, far beyond a CPU budget."""
    return RunConfig.from_dict(
        {
            "codec": {"rvq_layers": 16, "codebook_size": 1024},
            "conformer": {"layers": 8, "heads": 12, "model_dim": 768, "conv_kernel": 31, "lm_hidden": 2048},
            "lm": {"layers": 16, "heads": 16, "hidden": 2048, "dropout": 0.1, "rvq_layers": 16, "codebook_size": 1024},
            "train": {"lr": 5e-4, "warmup_steps": 2000, "epochs": 35, "batch_size": 24, "segment_s": 4.0, "label_smoothing": 0.1},
        }
    )
