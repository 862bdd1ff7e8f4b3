"""Amortized sampling from sequence posteriors defined by a tabular teacher model."""

__version__ = "0.1.0"
