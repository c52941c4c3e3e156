"""Hierarchical-latent CVAE trajectory forecasting on vectorized lane maps."""

__version__ = "0.1.0"
