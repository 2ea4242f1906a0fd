"""Two-stage AI-generated-music detection toolkit."""

__version__ = "0.1.0"
