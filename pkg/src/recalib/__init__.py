"""LiDAR-camera extrinsic re-calibration toolkit."""

__version__ = "0.1.0"
