"""Disentangled graph variational auto-encoder for multimodal recommendation."""

__version__ = "0.1.0"
