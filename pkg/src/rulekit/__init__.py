"""Typed rewrite rules for relational plans, with a bounded equivalence checker."""

__version__ = "0.1.0"
