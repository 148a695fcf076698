"""Localized gradient amplification for Schroedinger equations: numerical lab."""
__version__ = "0.1.0"
