"""Bidirectional knowledge reconfiguration and feature mover's distance for
point-cloud feature distillation, at desk scale."""

__version__ = "0.1.0"
