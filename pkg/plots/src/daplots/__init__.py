"""daplots: deterministic SVG figures from danet CSV exports."""

from .render import KINDS, FigureSpec, RenderResult, render

__version__ = "0.1.0"
