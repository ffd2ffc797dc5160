"""Fingerprint pore detection with a small fully convolutional network."""

__version__ = "0.1.0"
