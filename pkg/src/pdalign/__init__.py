"""Class-conditional distribution alignment for partial domain adaptation."""

__version__ = "0.1.0"
