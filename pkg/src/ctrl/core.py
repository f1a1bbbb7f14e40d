"""Shared array containers: attenuation volumes and projection stacks.

Volumes are indexed ``data[iz, iy, ix]`` with isotropic voxels; ``origin`` is
the world position (mm) of the centre of voxel (0, 0, 0), so voxel (ix,iy,iz)
sits at ``origin + voxel_size * (ix, iy, iz)``.

Sinograms are indexed ``data[view, row, col]``. ``layout`` records whether
the stack is in native cone geometry (columns = fan angles) or has been
rebinned to cone-parallel geometry (views = parallel angles theta,
columns = radial positions s).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import ScanGeometry


class SinogramLayout(enum.Enum):
    NATIVE_CONE = "native"
    CONE_PARALLEL = "parallel"


@dataclass
class Volume:
    """3D attenuation grid (unitless additive densities per mm of path).

    ``coverage``, when set by a reconstruction, marks voxels whose slice had
    sufficient angular coverage; uncovered voxels are zero, never NaN.
    """

    data: np.ndarray
    voxel_size: float
    origin: np.ndarray
    coverage: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("volume data must be 3D [nz, ny, nx]")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be > 0")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def axis_coords(self, axis: int) -> np.ndarray:
        """World coordinates of voxel centres along one axis (0=z,1=y,2=x)."""
        n = self.data.shape[axis]
        world_axis = {0: 2, 1: 1, 2: 0}[axis]
        return self.origin[world_axis] + self.voxel_size * np.arange(n)

    def copy(self) -> "Volume":
        cov = None if self.coverage is None else self.coverage.copy()
        return Volume(self.data.copy(), self.voxel_size, self.origin.copy(),
                      coverage=cov)


def centered_volume(data: np.ndarray, voxel_size: float,
                    center: np.ndarray | tuple = (0.0, 0.0, 0.0)) -> Volume:
    """Volume whose grid is centred on ``center`` (world xyz, mm)."""
    data = np.asarray(data, dtype=np.float64)
    nz, ny, nx = data.shape
    cx, cy, cz = np.asarray(center, dtype=np.float64)
    origin = np.array([cx - 0.5 * (nx - 1) * voxel_size,
                       cy - 0.5 * (ny - 1) * voxel_size,
                       cz - 0.5 * (nz - 1) * voxel_size])
    return Volume(data, voxel_size, origin)


@dataclass
class Sinogram:
    """View-indexed projection stack with geometry provenance.

    ``invalid_mask``, when present, flags cells that were zero-filled because
    they fell outside the measured data during rebinning.
    """

    data: np.ndarray
    geom: ScanGeometry
    layout: SinogramLayout = SinogramLayout.NATIVE_CONE
    grid: "object | None" = None            # ParallelGrid after rebinning
    invalid_mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("sinogram data must be 3D [views, rows, cols]")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("sinogram contains non-finite values")
        if self.layout is SinogramLayout.NATIVE_CONE:
            expect = (self.geom.n_views, self.geom.n_det_rows,
                      self.geom.n_det_cols)
            if self.data.shape != expect:
                raise ValueError(
                    f"native sinogram shape {self.data.shape} != {expect}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Sinogram":
        """Same metadata, new sample values."""
        return replace(self, data=np.asarray(data, dtype=np.float64))
