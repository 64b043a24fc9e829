"""Exchange-option pricing under finite liquidity."""

__version__ = "1.0.0"
