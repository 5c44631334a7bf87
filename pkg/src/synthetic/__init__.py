"""Ground-truth panel generator and brute-force reference computations."""
