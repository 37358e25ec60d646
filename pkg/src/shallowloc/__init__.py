"""Passive localization of surface vessels from a three-hydrophone seabed array."""

__version__ = "0.1.0"
