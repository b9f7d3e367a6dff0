"""Uncertainty-aware offline distributional actor-critic."""
