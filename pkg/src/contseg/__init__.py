"""Continual mask-classification segmentation on synthetic scenes."""

__version__ = "0.1.0"
