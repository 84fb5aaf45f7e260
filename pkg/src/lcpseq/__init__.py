"""Conditional variational sequence prediction with a learned conditional prior."""

__version__ = "0.1.0"
