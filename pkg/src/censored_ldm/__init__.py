"""Censored-likelihood latent diffusion for bounded gridded fields."""
from .autodiff import DTYPE

__version__ = "0.1.0"

__all__ = ["DTYPE", "__version__"]
