"""Negative correlation learning for shared-trunk regression ensembles."""

__version__ = "0.1.0"
