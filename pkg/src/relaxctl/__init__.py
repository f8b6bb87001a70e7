"""Relaxed stochastic control of linear SDEs with random coefficients."""

__version__ = "0.1.0"
