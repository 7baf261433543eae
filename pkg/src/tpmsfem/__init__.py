"""Finite-element toolkit for triply periodic minimal surface lattices."""

__version__ = "0.1.0"
