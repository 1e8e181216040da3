"""Differentially private federated cubic-regularized Newton learning."""

__version__ = "0.1.0"
