"""Tabular SARSA(0) with delayed/blocking updates and CKKS-encrypted batch updates."""

__version__ = "0.1.0"
