"""Amortized filtering inference for dynamic (superstatistical) models."""

__version__ = "0.1.0"
