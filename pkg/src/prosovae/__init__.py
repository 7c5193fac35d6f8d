"""Hierarchical conditional VAE for prosody, with a synthetic corpus and evaluation tools."""

__version__ = "0.1.0"
