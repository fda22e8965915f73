"""Model-predictive approximation of diffusion guidance on toy Gaussian mixtures."""

__version__ = "0.1.0"
