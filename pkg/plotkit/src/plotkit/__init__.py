"""Batch figure renderer for reservoir-management run directories."""

__version__ = "0.1.0"

from .figures import KINDS, render  # noqa: F401
from .stats import box_stats  # noqa: F401
