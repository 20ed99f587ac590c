"""Differentiable Gaussian-splatting surface reconstruction."""

__version__ = "0.1.0"
