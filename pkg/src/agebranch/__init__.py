"""Age-structured branching processes in a random environment."""

__version__ = "0.1.0"
