"""Geolocate candidate oil & gas infrastructure from VIIRS active-fire detections."""

__version__ = "0.1.0"
