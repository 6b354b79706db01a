"""Sequential Bayesian optimal experimental design for advection-diffusion sensor placement."""

__version__ = "0.1.0"
