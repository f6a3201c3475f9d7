"""Minimum-variance hedge ratios for index options learned from quote panels."""

__version__ = "0.1.0"
