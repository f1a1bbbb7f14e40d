import numpy as np
import pytest

from ctrl import presets
from ctrl.geometry import FfsMode, ScanGeometry
from ctrl.phantom import Ellipsoid, PhantomSpec, analytic_sinogram, voxelize


def tiny_geometry(ffs: bool = False, n_rows: int = 9, n_cols: int = 33,
                  views_per_rot: int = 64, n_rot: int = 4,
                  pitch: float = 8.0) -> ScanGeometry:
    """Small acquisition for fast unit tests (odd detector dims by default
    so exact centre cells exist)."""
    return ScanGeometry(
        source_radius=300.0,
        source_detector_dist=600.0,
        n_views_per_rot=views_per_rot,
        n_rotations=n_rot,
        n_det_rows=n_rows,
        n_det_cols=n_cols,
        det_col_spacing=0.006,
        det_row_spacing=3.0,
        pitch_z_per_rot=pitch,
        ffs_mode=FfsMode.ALPHA_Z if ffs else FfsMode.NONE,
        ffs_dalpha=4.0e-4 if ffs else 0.0,
        ffs_dz=0.2 if ffs else 0.0,
    )


def sphere_spec(radius: float = 14.0, density: float = 0.02,
                shape=(32, 32, 32), voxel: float = 2.0,
                center=(0.0, 0.0, 0.0)) -> PhantomSpec:
    return PhantomSpec((Ellipsoid(center, (radius, radius, radius),
                                  density),), shape, voxel)


@pytest.fixture(scope="session")
def desk_geom():
    return presets.desk_geometry()


@pytest.fixture(scope="session")
def desk_spec():
    return presets.desk_phantom()


@pytest.fixture(scope="session")
def desk_gt(desk_spec):
    return voxelize(desk_spec)


@pytest.fixture(scope="session")
def desk_sino(desk_spec, desk_geom):
    """Noiseless analytic acquisition at the quality desk geometry."""
    return analytic_sinogram(desk_spec, desk_geom)


@pytest.fixture(scope="session")
def train_geom():
    return presets.train_geometry()


@pytest.fixture(scope="session")
def train_sino(desk_spec, train_geom):
    return analytic_sinogram(desk_spec, train_geom)


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    """Compile the numba kernels once so timed tests measure compute only."""
    from ctrl.filters import bilateral_2d, bilateral_3d
    from ctrl.projector import forward_project
    from ctrl.rebin import default_parallel_grid, rebin_to_parallel
    from ctrl.recon import (ReconConfig, preweight, ramp_filter,
                            reconstruct_native, reconstruct_parallel)
    from ctrl.core import centered_volume

    geom = tiny_geometry(n_rows=5, n_cols=9, views_per_rot=8, n_rot=1)
    vol = centered_volume(np.zeros((8, 8, 8)), 1.0)
    sino = forward_project(vol, geom)
    par = rebin_to_parallel(sino, default_parallel_grid(geom))
    filt = ramp_filter(preweight(par))
    reconstruct_parallel(filt, ReconConfig(), (8, 8, 8), 1.0)
    reconstruct_native(sino, ReconConfig(), (8, 8, 8), 1.0)
    bilateral_2d(np.zeros((5, 5)), 1.0, 1.0)
    bilateral_3d(centered_volume(np.zeros((5, 5, 5)), 1.0), 1.0, 1.0)
