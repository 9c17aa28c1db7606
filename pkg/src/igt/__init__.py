"""Inverse game theory solvers: recover payoff parameters from observed equilibria."""

__version__ = "0.1.0"
