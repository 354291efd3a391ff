"""Sim-to-real trajectory style transfer for robotic cutting."""
__version__ = "0.1.0"
