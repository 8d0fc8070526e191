"""Stochastic finite volume simulation of gas flow on pipe networks."""

__version__ = "0.1.0"
