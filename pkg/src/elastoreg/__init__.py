"""Physics-informed non-rigid point-set registration."""

__version__ = "0.1.0"
