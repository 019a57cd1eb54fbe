"""Retrieval contexts for image-goal navigation, with a synthetic evaluation harness."""

__version__ = "0.1.0"
