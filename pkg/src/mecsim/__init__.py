"""Cooperative peer-offloading simulator and schedulers for edge networks."""

__version__ = "0.1.0"
