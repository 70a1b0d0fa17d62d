"""Adaptive multi-level moment-based LBM with two-way MPM sand coupling."""

__version__ = "0.1.0"
