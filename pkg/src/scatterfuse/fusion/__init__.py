"""Weighted compact-kernel densities, max-subtraction fusion and mode finding."""

from .density import (DensityField, EvalGrid, FieldEvaluator, GridTooCoarse,
                      SensorDataset, SUPERSAMPLE, combine, default_grid, evaluate_field,
                      fused_densities, fused_density, hit_bounds, sensor_densities,
                      sensor_density)
from .kernel import A_SWEEP, Bandwidth, NonpositivePitch, kernel_1d, kernel_eval, select_bandwidth
from .modes import Modes, find_modes, fused_modes

__all__ = [
    "A_SWEEP", "Bandwidth", "DensityField", "EvalGrid", "FieldEvaluator", "GridTooCoarse",
    "Modes", "NonpositivePitch", "SUPERSAMPLE", "SensorDataset", "combine", "default_grid",
    "evaluate_field", "find_modes", "fused_densities", "fused_density", "fused_modes",
    "hit_bounds", "kernel_1d", "kernel_eval", "select_bandwidth", "sensor_densities",
    "sensor_density",
]
