"""Learned active-set prediction for accelerating linear MPC."""

__version__ = "0.1.0"
