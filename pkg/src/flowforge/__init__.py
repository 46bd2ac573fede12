"""Reward-guided fine-tuning of a toy rectified-flow trajectory generator."""

__version__ = "0.1.0"
