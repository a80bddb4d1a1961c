"""Gait silhouette de-identification by latent optimization under a frozen diffusion prior."""

__version__ = "0.1.0"
