"""Figures written next to the CSV/JSON reports (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import TRACKS  # noqa: E402
from .dsp import AudioBuffer, mel_features  # noqa: E402


def plot_loss_curve(history: Sequence[dict], path) -> Path:
    steps = [h["step"] for h in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [h["loss"] for h in history], label="total", color="black", lw=1.2)
    if history:
        for r in range(len(history[0]["per_head"])):
            ax.plot(steps, [h["per_head"][r] for h in history], lw=0.7, alpha=0.7, label=f"head {r}")
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy (nats)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_metrics(report: dict, path) -> Path:
    """Per-track mel-L1 of the estimate next to the no-separation baseline."""
    est = report["estimate"]["tracks"]
    base = report.get("baseline", {}).get("tracks", {})
    x = np.arange(len(TRACKS))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(x - 0.2, [est[t]["mel_l1"] for t in TRACKS], 0.4, label="estimate")
    if base:
        ax.bar(x + 0.2, [base[t]["mel_l1"] for t in TRACKS], 0.4, label="mixture baseline")
    ax.set_xticks(x, TRACKS)
    ax.set_ylabel("mel-L1 vs roundtripped reference")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_spectrograms(mixture: AudioBuffer, stems: Sequence[AudioBuffer], path, references: Sequence[AudioBuffer] | None = None) -> Path:
    rows = [("mixture", mixture)] + [(f"{t} (estimate)", s) for t, s in zip(TRACKS, stems)]
    if references is not None:
        rows += [(f"{t} (reference)", s) for t, s in zip(TRACKS, references)]
    fig, axes = plt.subplots(len(rows), 1, figsize=(8, 1.4 * len(rows)), sharex=True)
    for ax, (name, audio) in zip(np.atleast_1d(axes), rows):
        m = mel_features(audio).values.T
        ax.imshow(m, origin="lower", aspect="auto", vmin=-11.5, vmax=max(float(m.max()), -6.0), cmap="magma")
        ax.set_ylabel(name, fontsize=7, rotation=0, ha="right")
        ax.set_yticks([])
    np.atleast_1d(axes)[-1].set_xlabel("mel frame")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
