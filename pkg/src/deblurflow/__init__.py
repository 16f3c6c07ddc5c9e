"""Blind motion deblurring via restoration-aligned flow matching, desk scale."""

__version__ = "0.1.0"
