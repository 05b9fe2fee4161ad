"""Neural-process preference models for populations with hidden user types."""

__version__ = "0.1.0"
