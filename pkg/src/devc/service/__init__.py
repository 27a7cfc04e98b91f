"""HTTP service wrapping the codec."""

from .app import ModelCache, create_app

__all__ = ["ModelCache", "create_app"]
