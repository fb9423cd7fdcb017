"""Conformal calibration of multi-turn QA trajectories with early stopping."""

__version__ = "0.1.0"
