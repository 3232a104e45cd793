"""Latent-plan diffusion: masked pretraining, embedding-space PPO, text inversion."""

__version__ = "0.1.0"
