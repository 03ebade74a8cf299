"""Discrete motion codebooks and masked dyadic pretraining for motion generation."""

__version__ = "0.1.0"
