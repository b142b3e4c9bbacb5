"""Federated, split and generalized splitfed learning over a byte-counted transport."""

__version__ = "0.1.0"
