"""Continual conditional-GAN training with Fisher-weighted parameter anchoring."""

__version__ = "0.1.0"
