"""Hypernetwork shape completion with a gradient-based occupancy sampler."""

__version__ = "0.1.0"
