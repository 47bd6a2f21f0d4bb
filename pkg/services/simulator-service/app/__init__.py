"""Cascade simulator service - trace-driven serving simulation and resource allocation."""

__version__ = "0.1.0"
