"""Unbalanced optimal transport unlearning for one-step flow-map generators."""

__version__ = "0.1.0"
