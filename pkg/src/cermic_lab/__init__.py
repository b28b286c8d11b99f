"""Calibrated, uncertainty-aware curiosity for multi-agent exploration, with its verification harness."""

__version__ = "0.1.0"
