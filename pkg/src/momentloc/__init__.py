"""Desk-scale engine for language-based temporal moment localization."""

__version__ = "0.1.0"
