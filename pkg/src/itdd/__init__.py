"""Incremental Transformer with a Deliberation Decoder for document-grounded dialogue."""

__version__ = "0.1.0"
