"""Sample-based penalized predictive control on a 2D dynamic-obstacle benchmark."""

__version__ = "0.1.0"
