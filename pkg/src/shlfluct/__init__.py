"""Simulation of Stationary Hastings-Levitov(0) and its fluctuation field."""

__version__ = "0.1.0"
