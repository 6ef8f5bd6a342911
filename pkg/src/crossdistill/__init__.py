"""Compose a frozen multilingual encoder with a monolingual retriever and align them by distillation."""

__version__ = "0.1.0"
