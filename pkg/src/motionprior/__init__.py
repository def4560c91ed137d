"""Latent-dynamics motion prior over an analytic skeleton, with MAP fitting."""

__version__ = "0.1.0"
