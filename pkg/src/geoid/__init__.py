"""Test-time multi-view consensus for per-view intrinsic predictions."""

__version__ = "0.1.0"
