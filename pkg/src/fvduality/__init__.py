"""Interacting Fleming-Viot processes, their dual hierarchy, and a
Monte-Carlo verification harness."""

__version__ = "0.1.0"
