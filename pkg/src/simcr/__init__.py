"""Consistency-regularized speech-to-text translation lab on a synthetic task."""

__version__ = "0.1.0"
