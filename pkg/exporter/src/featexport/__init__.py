"""Bridge pretrained feature extractors to MMLF feature archives."""

__version__ = "0.1.0"
