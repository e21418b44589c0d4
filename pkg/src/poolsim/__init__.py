"""Ride-pooling traffic and emissions simulator."""

__version__ = "0.1.0"
