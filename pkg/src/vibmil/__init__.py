"""Weakly supervised multiple-instance learning with information-bottleneck bag distillation."""

__version__ = "0.1.0"
