"""Multiply robust CATE estimation with a binary instrument, plus simulators and a benchmark harness."""

__version__ = "0.1.0"
