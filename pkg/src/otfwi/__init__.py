"""Optimal-transport misfit functions and a 2D acoustic FWI pipeline."""

__version__ = "0.1.0"
