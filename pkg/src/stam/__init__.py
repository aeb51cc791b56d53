"""Factorized space-time attention for frame-sequence classification."""

__version__ = "0.1.0"
