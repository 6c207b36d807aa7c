"""Key-region hiding attacks on LiDAR scan registration, with a void-detection defense."""

__version__ = "0.1.0"
