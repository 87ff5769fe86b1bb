"""Quantum optimal control with spectrally constrained driving fields."""

__version__ = "0.1.0"
