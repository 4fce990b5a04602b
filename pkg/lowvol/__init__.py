# lowvol/__init__.py
"""Low-volatility / low-beta research engine."""

__version__ = "0.1.0"
