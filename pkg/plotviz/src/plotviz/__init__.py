"""Batch figure renderer for learned-optimizer experiment CSVs."""

__version__ = "0.1.0"

from .render import FigureKind, FigureSpec, RenderError, RenderReport, render

__all__ = ["FigureKind", "FigureSpec", "RenderError", "RenderReport", "render", "__version__"]
