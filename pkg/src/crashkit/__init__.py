"""Collision scenario generation, filtering, closed-loop scoring and score-distillation planning."""

__version__ = "0.1.0"
