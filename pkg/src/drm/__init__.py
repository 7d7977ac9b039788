"""Dual-granularity relation modeling for scene graphs on a synthetic long-tailed benchmark."""

__version__ = "0.1.0"
