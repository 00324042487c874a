"""Compiler and cycle-level simulator for layer-pipelined sparse CNN accelerators."""

__version__ = "0.1.0"
