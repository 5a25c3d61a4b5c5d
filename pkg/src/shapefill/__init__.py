"""Self-supervised 3D shape completion with an involutive generator and a
shared implicit template space."""

__version__ = "0.1.0"
