"""Fused cell/tissue/edge features for tissue-region classification.

A small numpy pipeline: synthetic data, hand-built descriptors, trainable
attention aggregators (exact and Nystrom), weighted fusion and a one-vs-one
soft-margin SVM.
"""

__version__ = "0.1.0"
