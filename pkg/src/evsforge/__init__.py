"""Extrapolated-view urban scene optimization at desk scale."""

__version__ = "0.1.0"
