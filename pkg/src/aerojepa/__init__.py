"""Predictive-latent surrogate modelling for point-cloud aerodynamics."""

__version__ = "0.1.0"
