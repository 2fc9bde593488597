"""Optimal control as probabilistic inference: exact chains, factored models and CVM."""

__version__ = "0.1.0"
