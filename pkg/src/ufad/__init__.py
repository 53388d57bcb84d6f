"""Unified face-attack detection on a synthetic multi-attack benchmark."""

__version__ = "0.1.0"
