"""Particle quantum filters for constant-parameter estimation in open quantum systems."""

__version__ = "0.1.0"
