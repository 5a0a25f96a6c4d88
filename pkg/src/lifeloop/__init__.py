"""Desk-scale closed real-to-sim-to-real learning loop."""

__version__ = "0.1.0"
