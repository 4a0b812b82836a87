"""Catastrophic-forgetting benchmark for time-series forecasters."""

__version__ = "0.1.0"
