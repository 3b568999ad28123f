"""Masked multi-view pre-training with differentiable volumetric rendering."""

__version__ = "0.1.0"
