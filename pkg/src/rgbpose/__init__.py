"""RGB-only category-level 6D pose estimation on synthetic scenes."""

__version__ = "0.1.0"
