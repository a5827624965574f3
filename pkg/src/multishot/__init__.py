"""Reference-guided multi-shot video generation at toy scale."""

__version__ = "0.1.0"
