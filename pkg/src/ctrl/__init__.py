"""Helical cone-beam CT at desk scale: simulation, rebinned weighted FBP,
and bilateral denoising whose four strengths are tuned by a double deep-Q
agent."""

from .core import Sinogram, SinogramLayout, Volume, centered_volume
from .filters import FilterParams
from .geometry import (FfsMode, RayCoordinate, ScanGeometry, SourcePose,
                       detector_point, iso_center, source_position)
from .phantom import Ellipsoid, PhantomSpec
from .rebin import ParallelGrid

__version__ = "0.1.0"

__all__ = [
    "Sinogram", "SinogramLayout", "Volume", "centered_volume",
    "FilterParams", "FfsMode", "RayCoordinate", "ScanGeometry", "SourcePose",
    "detector_point", "iso_center", "source_position", "Ellipsoid",
    "PhantomSpec", "ParallelGrid", "__version__",
]
