"""Convolution + transformer video regression for ejection-fraction estimation."""
__version__ = "0.1.0"
