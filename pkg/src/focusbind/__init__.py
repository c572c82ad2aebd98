"""Syntax-guided attribute binding for text-conditioned diffusion."""

__version__ = "0.1.0"
