"""Offline figure generation from the simulation toolkit's CSV artifacts.

Consumes only the documented CSV formats (long-format state fields
``t,x,...``, side files ``t,U,mode,norm``, probability tables
``t,P_1,...``, mode paths ``t,mode`` and decay reports) and renders
PNG heatmaps, line plots and step plots.  A ``--dump-stats`` mode
prints per-column statistics straight from the CSV so rendered figures
can be audited against their inputs.
"""

from .figures import FigureSpec, column_stats, dump_stats, render

__version__ = "0.1.0"

__all__ = ["FigureSpec", "column_stats", "dump_stats", "render"]
