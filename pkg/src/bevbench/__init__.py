"""Desk-scale camera+LiDAR BEV detection benchmark under sensor occlusion."""

__version__ = "0.1.0"
