"""Asymmetric deep hashing for long-context KV cache retrieval."""

__version__ = '0.1.0'
