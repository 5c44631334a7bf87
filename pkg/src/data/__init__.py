"""Data processing and validation modules."""

