"""HTTP facade over the registration library."""
from .app import create_app

__all__ = ["create_app"]
