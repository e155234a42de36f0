"""Learned iterative reconstruction for limited-view parallel-beam CT."""

__version__ = "0.1.0"
