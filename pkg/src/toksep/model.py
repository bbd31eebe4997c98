"""The trainable separator (conditional encoder + LM) and its checkpoint I/O."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint
from .condenc import ConditionalEncoder
from .config import RunConfig
from .dsp import AudioBuffer, mel_features
from .errors import ValidationError
from .lm import SeparationLM
from .seeding import derive_seed


class Separator(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(cfg.seed, "separator-init"))
            self.encoder = ConditionalEncoder(cfg.conformer)
            self.lm = SeparationLM(cfg.lm)

    def mel(self, audio: AudioBuffer) -> np.ndarray:
        c = self.cfg.conformer
        return mel_features(audio, c.n_mels, c.fft_size, c.mel_hop).values.astype(np.float32)

    def prefix(self, mel: torch.Tensor) -> torch.Tensor:
        return self.encoder(mel)

    def forward(self, mel: torch.Tensor, tokens: torch.Tensor, streams: torch.Tensor) -> torch.Tensor:
        return self.lm(self.encoder(mel), tokens, streams)


def optimizer_tensors(opt: torch.optim.Optimizer, params: list[torch.nn.Parameter]) -> dict[str, torch.Tensor]:
    index = {id(p): i for i, p in enumerate(params)}
    out = {}
    for p, state in opt.state.items():
        i = index[id(p)]
        for k, v in state.items():
            out[f"optim.{i}.{k}"] = torch.as_tensor(v)
    return out


def load_optimizer_tensors(opt: torch.optim.Optimizer, params: list[torch.nn.Parameter], tensors: dict) -> None:
    for name, v in tensors.items():
        if not name.startswith("optim."):
            continue
        _, i, k = name.split(".", 2)
        opt.state[params[int(i)]][k] = v.clone()


def save_separator(path, model: Separator, *, step: int = 0, optimizer=None, codec_digest: str | None = None, **extra) -> str:
    tensors = checkpoint.prefixed(model.state_dict(), "separator.")
    if optimizer is not None:
        tensors.update(optimizer_tensors(optimizer, list(model.parameters())))
    return checkpoint.save_container(
        path, tensors, model.cfg.to_dict(), kind="separator", step=step, codec_digest=codec_digest, **extra
    )


def load_separator(path, optimizer_factory=None):
    """Returns ``(model, manifest, optimizer_or_None)``."""
    tensors, manifest = checkpoint.load_container(path)
    if manifest.get("kind") != "separator":
        raise ValidationError(f"{path} is not a separator checkpoint")
    model = Separator(RunConfig.from_dict(manifest["config"]))
    model.load_state_dict(checkpoint.subset(tensors, "separator."))
    opt = None
    if optimizer_factory is not None:
        opt = optimizer_factory(model)
        load_optimizer_tensors(opt, list(model.parameters()), tensors)
    model.eval()
    return model, manifest, opt
