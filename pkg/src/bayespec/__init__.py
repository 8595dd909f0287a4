"""Bayesian spectral deconvolution of Poisson count spectra."""

__version__ = "0.1.0"
