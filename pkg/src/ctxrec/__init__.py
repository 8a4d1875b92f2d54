"""Context-matched retrieval and scoring for long user behavior sequences."""

__version__ = "0.1.0"
