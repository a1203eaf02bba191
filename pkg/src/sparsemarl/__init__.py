"""Dynamic sparse training for value-decomposition multi-agent Q-learning."""

__version__ = "0.1.0"
