"""Floating random walk capacitance extraction with MicroWalk transitions."""

from .engine import CapacitanceResult, Config, Engine, WalkEvent, extract, first_transition, gaussian_surface, transition
from .geometry import Box, DielectricGrid, Structure, StructureError, load_structure, parse_structure
from .rng import Stream

__all__ = [
    "Box",
    "CapacitanceResult",
    "Config",
    "DielectricGrid",
    "Engine",
    "Stream",
    "Structure",
    "StructureError",
    "WalkEvent",
    "extract",
    "first_transition",
    "gaussian_surface",
    "load_structure",
    "parse_structure",
    "transition",
]
__version__ = "0.1.0"
