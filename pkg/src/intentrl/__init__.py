"""Desk-scale lab for value-guided sparse-reward RL on procedural mazes."""

__version__ = "0.1.0"
