"""Quasi-Bayes estimation of latent distributions from characteristic-function restrictions."""

__version__ = "0.1.0"
