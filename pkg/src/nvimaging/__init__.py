"""NV-centre nanoscale NMR: couplings, spin dynamics, spectra and position
reconstruction."""

__version__ = "0.1.0"

from .constants import DEFAULT_CONSTANTS, PhysicalConstants
from .spinsys import (
    GeometryError, HyperfineCoupling, NuclearSpin, NvConfig, SpinSystem, dipolar_vector,
    field_map, gradient_shift, homonuclear_coupling, hyperfine_from_position,
)

__all__ = [
    "DEFAULT_CONSTANTS", "PhysicalConstants", "GeometryError", "HyperfineCoupling", "NuclearSpin",
    "NvConfig", "SpinSystem", "dipolar_vector", "field_map", "gradient_shift", "homonuclear_coupling",
    "hyperfine_from_position", "__version__",
]
