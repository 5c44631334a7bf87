"""Demand models: Nested Factorization, HPF and logit baselines."""
