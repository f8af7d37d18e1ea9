"""Discontinuity-preserving diffeomorphic registration with per-region velocity fields."""
from .grid import BACKGROUND, LVBP, LVM, RV, Grid, LabelMap, VectorField, Volume
from .losses import LossWeights

__version__ = "0.1.0"

__all__ = ["BACKGROUND", "LVBP", "LVM", "RV", "Grid", "LabelMap", "VectorField", "Volume", "LossWeights"]
