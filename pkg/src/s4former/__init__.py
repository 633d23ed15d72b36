"""Diagonal state-space (S4D) layers inside Conformer-style convolution modules."""

__version__ = "0.1.0"
