"""Dual visual-linguistic interaction for answer grounding, on a numpy autodiff engine."""

__version__ = "0.1.0"
