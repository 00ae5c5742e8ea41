"""Desk-scale optical flow laboratory: PWC/IRR/RAFT-style models, training recipes, metrics and profiling."""

__version__ = "0.1.0"
