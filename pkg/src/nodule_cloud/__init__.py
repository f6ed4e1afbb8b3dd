"""Point-cloud false-positive reduction for CT nodule candidates."""

__version__ = "0.1.0"
