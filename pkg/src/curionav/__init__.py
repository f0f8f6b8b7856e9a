"""Curiosity-map object-goal navigation: simulator, policy, and benchmark."""

__version__ = "0.1.0"
