"""Minority-class image synthesis by evolving a latent Gaussian-mixture
distribution, with the training phases, baselines, metrics and command-line
front end around it."""

__version__ = "0.1.0"
