"""Nested Factorization demand estimation and counterfactual evaluation."""

__version__ = "0.1.0"
