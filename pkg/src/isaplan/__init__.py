"""Interaction- and safety-aware highway motion planning stack."""

__version__ = "0.1.0"
