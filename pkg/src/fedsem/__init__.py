"""Semantic clustering, non-IID partitioning and federated training of a
relation classifier over category tensors."""

__version__ = "0.1.0"
