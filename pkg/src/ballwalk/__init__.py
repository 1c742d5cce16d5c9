"""Numerical laboratory for hyperbolic-ball isometries, Schottky-group
boundary measures, a constructive stationary measure, and empirical
Fourier-decay estimates for the resulting measures."""

__version__ = "0.1.0"
