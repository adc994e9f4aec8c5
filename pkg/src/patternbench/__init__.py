"""Workbench for block-structured process models built through change patterns."""

__version__ = "0.1.0"
