"""Epistemic value estimation for Q-learning agents."""

__version__ = "0.1.0"
