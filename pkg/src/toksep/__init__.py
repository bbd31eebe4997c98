"""Generative four-stem music separation with codec tokens and a causal LM."""

__version__ = "0.1.0"

TRACKS = ("vocals", "drums", "bass", "other")
