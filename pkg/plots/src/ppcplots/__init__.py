"""Paper-style figure renderers for ppcnav CSV outputs."""

__version__ = "0.1.0"
