"""Semantic successive interference cancellation for multi-user text transmission."""

__version__ = "0.1.0"
