"""Concept-guided synthetic dermoscopy images and their downstream classifier evaluation."""

__version__ = "0.1.0"
