"""Triplane VAE + latent diffusion pipeline for textured mesh generation."""

__version__ = "0.1.0"
