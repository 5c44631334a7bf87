"""Utility functions for the demand engine."""
