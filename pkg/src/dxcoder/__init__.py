"""Desk-scale automated clinical diagnosis coding toolkit."""

__version__ = "0.1.0"
