"""Resting-state network labeling pipeline: preprocessing, group ICA, dual
regression, component encoding and MLP classification."""

__version__ = "0.1.0"
