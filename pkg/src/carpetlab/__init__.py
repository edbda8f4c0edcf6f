"""Numerical laboratory for Sierpinski-carpet diffusion scaling."""

__version__ = "0.1.0"
