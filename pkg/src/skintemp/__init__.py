"""Non-invasive skin-temperature regression from video."""

__version__ = "0.1.0"
