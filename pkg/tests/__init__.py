"""Test suite for the nested factorization demand engine."""
