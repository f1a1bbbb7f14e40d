"""Bundled desk-scale configurations.

Two acquisition presets sized for CI-friendly runs on a few cores: ``desk``
(quality-oriented, used by the end-to-end fidelity checks) and ``train``
(leaner, used for agent training runs). ``desk_phantom`` is a nested-ellipsoid
abdomen stand-in with water-like attenuation (~0.02/mm) so that line
integrals stay in a photon-friendly range.
"""

from __future__ import annotations

from .geometry import FfsMode, ScanGeometry
from .phantom import Ellipsoid, PhantomSpec


def desk_geometry(ffs: bool = False) -> ScanGeometry:
    """Quality desk scan: 8 rotations, 256 views/rot, 24 x 128 detector."""
    return ScanGeometry(
        source_radius=300.0,
        source_detector_dist=600.0,
        n_views_per_rot=256,
        n_rotations=8,
        n_det_rows=24,
        n_det_cols=128,
        det_col_spacing=0.0025,
        det_row_spacing=2.0,
        pitch_z_per_rot=12.0,
        ffs_mode=FfsMode.ALPHA_Z if ffs else FfsMode.NONE,
        ffs_dalpha=4.0e-4 if ffs else 0.0,
        ffs_dz=0.2 if ffs else 0.0,
    )


def train_geometry(ffs: bool = False) -> ScanGeometry:
    """Lean scan for agent training: 6 rotations, 160 views/rot, 16 x 96."""
    return ScanGeometry(
        source_radius=300.0,
        source_detector_dist=600.0,
        n_views_per_rot=160,
        n_rotations=6,
        n_det_rows=16,
        n_det_cols=96,
        det_col_spacing=0.00335,
        det_row_spacing=2.5,
        pitch_z_per_rot=16.0,
        ffs_mode=FfsMode.ALPHA_Z if ffs else FfsMode.NONE,
        ffs_dalpha=4.0e-4 if ffs else 0.0,
        ffs_dz=0.2 if ffs else 0.0,
    )


def desk_phantom(shape: tuple[int, int, int] = (64, 64, 64),
                 voxel_size: float = 1.0) -> PhantomSpec:
    """Nested-ellipsoid phantom centred on the scan isocenter.

    Two concentric body shells soften the outer density step (staircase
    artefacts of binary voxelization concentrate at large density jumps),
    plus a low-density cavity and two lesions. Axes avoid grid alignment.
    """
    shell_a = Ellipsoid((0.3, -0.2, 0.1), (29.4, 25.7, 29.6), 0.010)
    shell_b = Ellipsoid((0.1, 0.2, -0.1), (26.6, 23.1, 26.8), 0.010)
    cavity = Ellipsoid((4.1, 2.2, 0.3), (16.7, 14.4, 20.6), -0.008)
    lesion_a = Ellipsoid((-9.2, -7.1, 6.3), (6.2, 5.8, 6.1), 0.009)
    lesion_b = Ellipsoid((8.1, 6.2, -8.3), (5.1, 4.9, 5.2), 0.012)
    return PhantomSpec((shell_a, shell_b, cavity, lesion_a, lesion_b),
                       shape, voxel_size)


PRESET_GEOMETRIES = {"desk": desk_geometry, "train": train_geometry}
