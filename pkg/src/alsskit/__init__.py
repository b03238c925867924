"""Lightweight split/shuffle detector blocks, box-regression losses and detection metrics."""

__version__ = "0.1.0"
