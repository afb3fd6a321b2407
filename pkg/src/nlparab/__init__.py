"""Solver and verification lab for parabolic fully nonlinear nonlocal equations."""

__version__ = "0.1.0"
