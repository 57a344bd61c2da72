"""Operator grafting for small diffusion transformers."""

__version__ = "0.1.0"
