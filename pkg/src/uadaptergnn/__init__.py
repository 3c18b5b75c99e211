"""Uncertainty-aware Gaussian adapters for frozen, pre-trained GIN backbones."""

__version__ = "0.1.0"
