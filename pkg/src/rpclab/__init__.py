"""Simulation and verification tools for hierarchical spin-glass Gibbs measures."""

__version__ = "0.1.0"
