"""Figures for poolsim outputs, fed purely by the written run files."""

from .figures import FIGURE_KINDS, render

__all__ = ["FIGURE_KINDS", "render"]
