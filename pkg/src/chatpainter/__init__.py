"""Dialogue-conditioned two-stage GAN on a synthetic shapes corpus."""

__version__ = "0.1.0"
