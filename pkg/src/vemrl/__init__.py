"""Offline value-model-guided policy learning on synthetic GUI-navigation environments."""

__version__ = "0.1.0"
