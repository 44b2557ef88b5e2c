"""Multi-color phase-only holograms with learned laser-power initialization."""

from .holo_opt import (
    LaserPowerMatrix,
    OptimizationConfig,
    OptimizationResult,
    TargetScene,
    optimize_multicolor,
    optimize_single_color,
)
from .optics import ComplexField, PhaseHologramSet, TransferFunction, make_transfer_function, propagate

__version__ = "0.1.0"

__all__ = [
    "ComplexField",
    "LaserPowerMatrix",
    "OptimizationConfig",
    "OptimizationResult",
    "PhaseHologramSet",
    "TargetScene",
    "TransferFunction",
    "make_transfer_function",
    "optimize_multicolor",
    "optimize_single_color",
    "propagate",
]
