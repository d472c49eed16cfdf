"""Noise2Noise denoising of ultrasound RF data."""

__version__ = "0.1.0"
