"""Self-supervised video representations from temporal transformation discrimination."""

__version__ = "0.1.0"
