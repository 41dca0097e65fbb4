"""Weakly supervised phrase grounding with knowledge-gated attention."""

__version__ = "0.1.0"
