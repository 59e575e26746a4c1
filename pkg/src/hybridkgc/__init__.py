"""Inductive knowledge graph completion from mined path rules and neural rerankers."""

__version__ = "0.1.0"
