"""Entropy-smoothed policy optimization for multi-turn agents, at toy scale."""

__version__ = "0.1.0"
