"""Continuous-space Tangram benchmark with a reward-guided refinement loop."""

__version__ = "0.1.0"
