"""Posterior-transition reweighting for offline policy post-training."""

__version__ = "0.1.0"
