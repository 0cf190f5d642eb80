"""Noisy pseudo-label ventricle segmentation on synthetic two-channel brain phantoms."""

__version__ = "0.1.0"
