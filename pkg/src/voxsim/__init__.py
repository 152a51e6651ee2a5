"""Semantic occupancy map fusion, lane topology extraction, and closed-loop
traffic simulation toolkit."""

__version__ = "0.1.0"
