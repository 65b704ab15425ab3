"""Gaussian-DP-calibrated functional mechanism inside a convolutional
conditional neural process, with its accounting, sampling and oracle tools."""

__version__ = "0.1.0"
