"""Desk-scale sparse LiDAR-camera 3D detection decoder and test harness."""

__version__ = "0.1.0"
