"""Contact-constrained trajectory generation for planar articulated robots."""

__version__ = "0.1.0"
