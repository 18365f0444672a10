"""Edge-preserving nonlinear diffusion that drives images towards a piecewise-constant cartoon."""
from .diffusivity import BoundedStep, Linear, PeronaMalik, Proposed, RegularizedPower
from .edges import EdgeMap, detect_edges, f_measure, precision_recall
from .errors import (
    CartoonDiffError,
    ConvergenceError,
    DegenerateMeanError,
    DominanceError,
    FormatError,
    NotSettledError,
    StabilityError,
)
from .grid import ImageVolume, load_pgm, load_raw3d, normalize, save_pgm, save_raw3d
from .params import estimate_gamma, mad, tune_p
from .solver import Auto, FilterConfig, aos_step, filter_run
from .stopping import settling_time

__version__ = "0.1.0"

__all__ = [
    "Auto",
    "BoundedStep",
    "CartoonDiffError",
    "ConvergenceError",
    "DegenerateMeanError",
    "DominanceError",
    "EdgeMap",
    "FilterConfig",
    "FormatError",
    "ImageVolume",
    "Linear",
    "NotSettledError",
    "PeronaMalik",
    "Proposed",
    "RegularizedPower",
    "StabilityError",
    "aos_step",
    "detect_edges",
    "estimate_gamma",
    "f_measure",
    "filter_run",
    "load_pgm",
    "load_raw3d",
    "mad",
    "normalize",
    "precision_recall",
    "save_pgm",
    "save_raw3d",
    "settling_time",
    "tune_p",
]
