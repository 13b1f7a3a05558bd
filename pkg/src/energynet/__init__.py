"""Deterministic simulator for software-defined energy routing networks."""

__version__ = "0.1.0"
