"""Conditional GAN with a steerable-filter response loss for angiography-like synthesis."""

__version__ = "0.1.0"
