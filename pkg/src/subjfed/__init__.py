"""Federated evidential learning with subjective-logic fusion and upload filtering."""

__version__ = "0.1.0"
