"""Sequence-level non-rigid structure from motion: Jacobi SVD, tape autodiff,
Procrustes alignment, a single-frame lifter with a Toeplitz context layer,
losses, synthetic data, training and a command line."""

__version__ = "0.1.0"
