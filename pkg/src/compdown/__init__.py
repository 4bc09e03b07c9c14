"""Compositional downscaling in Aitchison geometry."""

__version__ = "0.1.0"
