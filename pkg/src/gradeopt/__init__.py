"""Boundary-focused exemplar set optimization for LLM rubric grading."""

__version__ = "0.1.0"
