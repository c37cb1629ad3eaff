"""Acoustic networking simulator for inflatable modular soft robots."""

from __future__ import annotations

__version__ = "0.1.0"
