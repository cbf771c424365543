"""Federated few-shot text classification simulator.

Simulates prompt-based federated fine-tuning of a small masked language
model under scarce, skewed label distributions, with optional
pseudo-label data augmentation. Everything is deterministic given the
seeds in the run configuration.
"""

__version__ = "0.1.0"
