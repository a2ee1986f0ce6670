"""Denoiser wire-protocol bridge."""

__version__ = "0.1.0"
