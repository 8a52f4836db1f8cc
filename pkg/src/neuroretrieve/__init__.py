"""Passage retrieval from word-aligned neural-signal queries.

The package trains a small transformer encoder to embed fixed-size
per-word signal segments into the embedding space of a frozen text
provider, then evaluates retrieval quality under increasing document
masking. See the README for the command line entry points.
"""

__version__ = "0.1.0"
