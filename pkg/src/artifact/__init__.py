"""Magnetic Schrodinger inverse spectral laboratory on simple surfaces."""
__version__ = "0.1.0"
