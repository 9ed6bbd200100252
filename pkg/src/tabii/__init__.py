"""Tabular incremental inference: adapt a trained tabular classifier to
columns that only exist at inference time, without inference labels."""

__version__ = "0.1.0"
