"""Desk-scale lab for continual learning under domain shift."""

__version__ = "0.1.0"
