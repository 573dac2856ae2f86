"""Differentiable closed-form base learners for episodic few-shot learning."""

__version__ = "0.1.0"
