"""Desk-scale federated learning simulator for multi-scale histopathology grading."""

__version__ = "0.1.0"
