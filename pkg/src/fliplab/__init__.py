"""Sparse-training lab: sign-flip saliency pruning with self-annealing gradient noise."""

__version__ = "0.1.0"
