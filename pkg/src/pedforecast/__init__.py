"""Two-stage pedestrian crossing prediction from predicted future video frames."""

__version__ = "0.1.0"
