"""Desk-scale serverless cluster manager with a benchmarking harness."""

__version__ = "0.1.0"
