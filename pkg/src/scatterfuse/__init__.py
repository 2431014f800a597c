"""Decision-level fusion of scattered multi-sensor detections."""

__version__ = "0.1.0"
