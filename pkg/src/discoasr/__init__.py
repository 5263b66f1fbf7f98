"""Disentangled Conformer CTC models and a speaker continual-learning benchmark."""

__version__ = "0.1.0"
