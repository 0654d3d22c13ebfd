"""Geosocial Bluetooth/GPS features and the loneliness evaluation pipeline."""

__version__ = "0.1.0"
