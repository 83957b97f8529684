"""Hybrid ANN-SNN windowed-attention detector for frames and events."""

__version__ = "0.1.0"
