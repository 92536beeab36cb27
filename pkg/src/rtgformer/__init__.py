"""Return-conditioned causal transformer for offline RL on a toy Catch game."""

__version__ = "0.1.0"
