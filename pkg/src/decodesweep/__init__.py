"""Decoding strategies, generation-quality metrics and a reproducible sweep harness."""

__version__ = "0.1.0"
