"""Self-supervised cross-domain representation learning for hyperspectral images."""

__version__ = "0.1.0"
