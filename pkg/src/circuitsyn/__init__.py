"""Synthetic circuit diagrams, SPICE decks and DC simulation for perception-model training and evaluation."""

__version__ = "0.1.0"
