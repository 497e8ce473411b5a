"""Adaptive prediction-set calibration over group orbits for structured data."""

__version__ = "0.1.0"
