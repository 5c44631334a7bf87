"""Predictive fit, counterfactual events, elasticities, placebo tests and reports."""
