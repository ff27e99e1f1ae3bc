"""Hierarchical GFlowNet crystal structure generation."""
__version__ = "0.1.0"
