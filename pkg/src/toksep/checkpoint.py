"""Checkpoint container: a directory holding ``manifest.json`` plus one raw
little-endian float32 blob per tensor."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from . import __version__
from .errors import ValidationError

MANIFEST = "manifest.json"


def _blob(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy()).astype("<f4").tobytes()


def tensors_digest(tensors: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name]
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(_blob(t))
    return h.hexdigest()


def module_digest(module: torch.nn.Module) -> str:
    return tensors_digest(module.state_dict())


def save_container(path, tensors: Mapping[str, torch.Tensor], config: dict, **extra) -> str:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, name in enumerate(sorted(tensors)):
        t = tensors[name]
        fname = f"t{i:05d}.bin"
        (path / fname).write_bytes(_blob(t))
        entries.append(
            {"name": name, "shape": list(t.shape), "dtype": "float32", "orig_dtype": str(t.dtype).replace("torch.", ""), "file": fname}
        )
    digest = tensors_digest(tensors)
    manifest = {"format": "toksep-container/1", "tool_version": __version__, "config": config, "tensors": entries, "digest": digest}
    manifest.update(extra)
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, path / MANIFEST)
    return digest


def read_manifest(path) -> dict:
    p = Path(path) / MANIFEST
    if not p.exists():
        raise ValidationError(f"no checkpoint manifest at {path}")
    return json.loads(p.read_text())


def load_container(path, verify: bool = True) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    manifest = read_manifest(path)
    tensors = {}
    for e in manifest["tensors"]:
        raw = (path / e["file"]).read_bytes()
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if len(raw) != 4 * n:
            raise ValidationError(f"checkpoint tensor {e['name']} has wrong size")
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
        t = torch.from_numpy(arr)
        orig = e.get("orig_dtype", "float32")
        if orig != "float32":
            t = t.to(getattr(torch, orig))
        tensors[e["name"]] = t
    if verify and tensors_digest(tensors) != manifest.get("digest"):
        raise ValidationError(f"checkpoint digest mismatch in {path}")
    return tensors, manifest


def subset(tensors: Mapping[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    return {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}


def prefixed(state: Mapping[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in state.items()}
