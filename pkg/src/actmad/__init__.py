"""Test-time adaptation by activation statistics alignment, with a desk-scale benchmark harness."""

__version__ = "0.1.0"
