"""Desk-scale testbed for measuring TreeKEM group key agreement."""

__version__ = "0.1.0"
