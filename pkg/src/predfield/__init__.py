"""Predictable motion fields: space-time radiance and motion fields with a learned motion predictor."""

__version__ = "0.1.0"
