"""Multimodal future-position prediction with a grid-latent Gaussian mixture output."""

__version__ = "0.1.0"
