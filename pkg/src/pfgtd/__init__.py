"""Parameter-free gradient temporal-difference learning."""

__version__ = "0.1.0"
