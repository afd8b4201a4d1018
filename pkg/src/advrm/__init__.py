"""Synthetic RLHF lab for adversarial attacks on reward models and adversarial training."""

__version__ = "0.1.0"
