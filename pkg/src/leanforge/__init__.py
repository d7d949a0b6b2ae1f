"""Lean4 corpus-to-dataset pipeline and iterative proof-writing harness."""

__version__ = "0.1.0"
