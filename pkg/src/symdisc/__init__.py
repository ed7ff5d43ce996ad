"""Discover Lie algebra symmetries of differentiable maps by linear algebra."""

__version__ = "0.1.0"
