"""Plotting scripts for the solver's CSV/JSON exports.

Pure consumers: everything here reads the documented export files and writes
images; nothing feeds back into the solver pipeline.
"""

from .io import FieldExport, FigureError, load_field, load_rollout, load_sweep
from .render import render_level_sets, render_phase_portrait, render_sweep

__version__ = "0.1.0"
