"""Sparse-coded multiplexing for over-the-air federated learning on MIMO channels."""

__version__ = "0.1.0"
