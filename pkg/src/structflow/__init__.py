"""Real-time structure flow estimation on spherical pixel grids."""
from .errors import ConfigurationError, DataError, StabilityError
from .filter import FilterConfig, FilterState, StructureFlowFilter, filter_step, init_state
from .kinematics import CameraMotion
from .sphere_grid import SphereGrid, build_gnomonic_patch, build_pyramid

__all__ = [
    "CameraMotion",
    "ConfigurationError",
    "DataError",
    "FilterConfig",
    "FilterState",
    "SphereGrid",
    "StabilityError",
    "StructureFlowFilter",
    "build_gnomonic_patch",
    "build_pyramid",
    "filter_step",
    "init_state",
]

__version__ = "0.1.0"
