"""Occlusion-aware feature completion on a synthetic part-structured world."""

__version__ = "0.1.0"
