"""Cascaded latent diffusion for high-resolution single-channel image synthesis."""
