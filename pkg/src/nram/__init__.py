"""Differentiable register machine with external memory, and its discrete counterpart."""
__version__ = "0.1.0"
