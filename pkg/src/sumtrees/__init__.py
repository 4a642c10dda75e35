"""Bayesian additive regression trees: sampler, inference toolkit and CLI."""

__version__ = "0.1.0"
