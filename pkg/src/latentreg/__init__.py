"""Regression on noisy latent attributes: measurement-error corrected slopes,
regress-on-shrinkage comparisons, NPMLE posterior-mean regression, bootstrap
inference, precision-independence diagnostics and a Monte Carlo engine."""

__version__ = "0.1.0"
