"""Figure rendering for the fewshot evaluator's delimited outputs."""

from .io import (AblationTable, CurveFile, PlotDataError, TrainingLog,
                 read_ablation, read_curve, read_training_log)
from .render import render_ablation, render_curve, render_training

__version__ = "0.1.0"
