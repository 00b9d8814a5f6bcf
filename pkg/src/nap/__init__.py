"""Next-action prediction for procedure-driven phone calls."""

__version__ = "0.1.0"
