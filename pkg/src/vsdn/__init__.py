"""Visual-semantic decoupling network for scene-text recognition."""

__version__ = "0.1.0"
