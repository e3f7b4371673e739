"""Numerical laboratory for the fast-diffusion equation ``d_t u^p = Lap u + b u`` near extinction."""

__version__ = "0.1.0"
