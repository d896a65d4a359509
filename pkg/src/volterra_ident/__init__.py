"""Volterra integral equations driven by Gaussian noise: simulation,
drift-parameter identification, and predictive confidence bands."""

__version__ = "0.1.0"
