"""statdistill: desk-scale dataset condensation by multi-backbone statistical matching."""

__version__ = "0.1.0"
