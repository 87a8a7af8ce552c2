"""Marketplace premium-subsidy microsimulation: regimes, quotes, demand and budget allocation."""

__version__ = "0.1.0"
