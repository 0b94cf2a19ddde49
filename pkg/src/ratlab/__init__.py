"""Selective rationalization lab: RNP and A2R training, synthetic benchmarks, landscape theory."""

__version__ = "0.1.0"
