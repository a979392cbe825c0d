"""Replay-attack detection from robot silhouettes and encoder residuals."""

__version__ = "0.1.0"
