"""Trace-driven simulation of intersection-attack mitigation with buddy sets."""

__version__ = "0.1.0"
