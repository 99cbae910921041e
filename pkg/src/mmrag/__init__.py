"""Desk-scale retrieval-augmented multimodal question answering."""

__version__ = "0.1.0"
