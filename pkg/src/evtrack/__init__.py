"""evtrack: frame+event any-point tracking at desk scale."""

__version__ = "0.1.0"
