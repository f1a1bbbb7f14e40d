"""Helical cone-beam acquisition geometry.

Conventions used by every module in this package:

* Angles are radians, lengths are millimetres.
* The scanner z axis is the table axis. The source rotates counter-clockwise
  in the xy-plane; at rotation angle ``alpha = 0`` the undeflected source sits
  on the +y axis at ``(0, source_radius, 0)``.
* The table feed is folded into the source trajectory: the source z coordinate
  is ``pitch_z_per_rot * alpha / (2*pi)``, so a scan with ``n_rotations`` turns
  spans z in ``[0, pitch_z_per_rot * n_rotations]``. The axial midpoint of that
  span is the natural place to centre phantoms and reconstruction grids; see
  :func:`iso_center`.
* The cylindrical detector is rigid on the gantry: a detector cell is
  addressed by the fan angle ``beta`` (column direction, radians) and the row
  height ``t`` (mm, axial). Flying-focal-spot deflection moves the source
  only, never the detector.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np


class FfsMode(enum.Enum):
    """Flying-focal-spot operating mode."""

    NONE = "none"
    ALPHA_Z = "alphaz"


# Per-view deflection sign pattern for ALPHA_Z mode: consecutive views cycle
# through the four sign combinations of (+-dalpha, +-dz).
FFS_PHASES = ((1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0))


class GeometryError(ValueError):
    """Raised for inconsistent acquisition parameters."""


@dataclass(frozen=True)
class ScanGeometry:
    """Full description of one helical cone-beam acquisition.

    Attributes
    ----------
    source_radius : float
        Source-to-isocenter distance (mm).
    source_detector_dist : float
        Source-to-detector distance R (mm); the cylindrical detector has
        radius R centred on the source.
    n_views_per_rot : int
        Projections per full rotation.
    n_rotations : int
        Number of full rotations in the scan.
    n_det_rows, n_det_cols : int
        Detector grid size (rows are axial, columns run along the fan).
    det_col_spacing : float
        Fan angle increment per column (rad).
    det_row_spacing : float
        Row height increment (mm, measured at the detector).
    pitch_z_per_rot : float
        Table feed per full rotation (mm).
    ffs_mode : FfsMode
        Focal-spot deflection mode.
    ffs_dalpha, ffs_dz : float
        Deflection amplitudes (rad / mm); must be zero when ffs_mode is NONE.
    """

    source_radius: float
    source_detector_dist: float
    n_views_per_rot: int
    n_rotations: int
    n_det_rows: int
    n_det_cols: int
    det_col_spacing: float
    det_row_spacing: float
    pitch_z_per_rot: float
    ffs_mode: FfsMode = FfsMode.NONE
    ffs_dalpha: float = 0.0
    ffs_dz: float = 0.0

    def __post_init__(self):
        counts = (self.n_views_per_rot, self.n_rotations, self.n_det_rows,
                  self.n_det_cols)
        if any(int(c) < 1 or int(c) != c for c in counts):
            raise GeometryError("counts must be integers >= 1")
        lengths = (self.source_radius, self.source_detector_dist,
                   self.det_col_spacing, self.det_row_spacing,
                   self.pitch_z_per_rot)
        if any(v <= 0 for v in lengths):
            raise GeometryError("lengths and spacings must be > 0")
        if self.source_detector_dist <= self.source_radius:
            raise GeometryError("source_detector_dist must exceed source_radius")
        if self.ffs_mode is FfsMode.NONE:
            if self.ffs_dalpha != 0.0 or self.ffs_dz != 0.0:
                raise GeometryError("ffs deflections must be 0 in NONE mode")
        else:
            if self.n_views_per_rot % 4 != 0:
                raise GeometryError(
                    "n_views_per_rot must be divisible by 4 in ALPHA_Z mode")

    # -- derived quantities -------------------------------------------------

    @property
    def n_views(self) -> int:
        return self.n_views_per_rot * self.n_rotations

    @property
    def view_spacing(self) -> float:
        """Angular increment between consecutive views (rad)."""
        return 2.0 * math.pi / self.n_views_per_rot

    @property
    def half_fan_angle(self) -> float:
        """Fan angle of the outermost column centre (rad)."""
        return 0.5 * (self.n_det_cols - 1) * self.det_col_spacing

    @property
    def fov_radius(self) -> float:
        """Radius of the measured field of view at the isocenter (mm)."""
        return self.source_radius * math.sin(self.half_fan_angle)

    @property
    def half_height_iso(self) -> float:
        """Half of the detector z-coverage projected to the isocenter (mm)."""
        half_det = 0.5 * (self.n_det_rows - 1) * self.det_row_spacing
        return half_det * self.source_radius / self.source_detector_dist

    def view_angles(self) -> np.ndarray:
        """Nominal rotation angle of every view (rad, undeflected)."""
        return np.arange(self.n_views) * self.view_spacing

    def fan_angles(self) -> np.ndarray:
        """Fan angle of every detector column centre (rad)."""
        j = np.arange(self.n_det_cols)
        return (j - 0.5 * (self.n_det_cols - 1)) * self.det_col_spacing

    def row_heights(self) -> np.ndarray:
        """Axial height of every detector row centre (mm, at the detector)."""
        i = np.arange(self.n_det_rows)
        return (i - 0.5 * (self.n_det_rows - 1)) * self.det_row_spacing


@dataclass(frozen=True)
class SourcePose:
    """Source location for one view (possibly FFS-deflected)."""

    alpha: float
    position: np.ndarray = field(repr=False)
    z_table: float = 0.0


@dataclass(frozen=True)
class RayCoordinate:
    """Native detector address of one ray: rotation angle, fan angle, row."""

    alpha: float
    beta: float
    t: float


def ffs_offsets(geom: ScanGeometry, view_index: int) -> tuple[float, float]:
    """Deflection (dalpha, dz) applied to the given view's focal spot."""
    if geom.ffs_mode is FfsMode.NONE:
        return 0.0, 0.0
    sa, sz = FFS_PHASES[view_index % 4]
    return sa * geom.ffs_dalpha, sz * geom.ffs_dz


def spiral_point(geom: ScanGeometry, alpha: float,
                 dalpha: float = 0.0, dz: float = 0.0) -> np.ndarray:
    """Point on the (possibly deflected) source spiral at angle ``alpha``.

    The deflection rotates the focal spot tangentially by ``dalpha`` and
    shifts it axially by ``dz``; the spiral radius is unchanged.
    """
    a = alpha + dalpha
    z = geom.pitch_z_per_rot * alpha / (2.0 * math.pi) + dz
    return np.array([-geom.source_radius * math.sin(a),
                     geom.source_radius * math.cos(a), z])


def source_position(geom: ScanGeometry, view_index: int) -> SourcePose:
    """Source pose of one view, with the view's FFS phase applied."""
    if not 0 <= view_index < geom.n_views:
        raise IndexError(
            f"view_index {view_index} out of range [0, {geom.n_views})")
    alpha = view_index * geom.view_spacing
    dalpha, dz = ffs_offsets(geom, view_index)
    pos = spiral_point(geom, alpha, dalpha, dz)
    return SourcePose(alpha=alpha, position=pos, z_table=pos[2])


def detector_point(geom: ScanGeometry, ray: RayCoordinate) -> np.ndarray:
    """World position of the detector cell addressed by ``ray``.

    The cell sits on the gantry-fixed cylinder of radius R around the
    undeflected source: moving by the fan angle ``beta`` sweeps the ray
    in-plane, and ``t`` offsets it axially. With the source on +y at
    ``alpha = 0``, the in-plane offset direction is
    ``(sin(alpha+beta), -cos(alpha+beta), 0)`` so that the ``beta = 0`` ray
    passes through the isocenter.
    """
    src = spiral_point(geom, ray.alpha)
    ab = ray.alpha + ray.beta
    R = geom.source_detector_dist
    return src + np.array([R * math.sin(ab), -R * math.cos(ab), ray.t])


def iso_center(geom: ScanGeometry) -> np.ndarray:
    """Axial midpoint of the scanned z range, on the rotation axis.

    Phantom definitions and reconstruction grids are centred here so that a
    scan starting at z = 0 covers them symmetrically.
    """
    z_mid = 0.5 * geom.pitch_z_per_rot * geom.n_rotations
    return np.array([0.0, 0.0, z_mid])


def geometry_to_dict(geom: ScanGeometry) -> dict:
    """Flat key/value form used in file sidecars."""
    return {
        "source_radius": repr(geom.source_radius),
        "source_detector_dist": repr(geom.source_detector_dist),
        "n_views_per_rot": str(geom.n_views_per_rot),
        "n_rotations": str(geom.n_rotations),
        "n_det_rows": str(geom.n_det_rows),
        "n_det_cols": str(geom.n_det_cols),
        "det_col_spacing": repr(geom.det_col_spacing),
        "det_row_spacing": repr(geom.det_row_spacing),
        "pitch_z_per_rot": repr(geom.pitch_z_per_rot),
        "ffs_mode": geom.ffs_mode.value,
        "ffs_dalpha": repr(geom.ffs_dalpha),
        "ffs_dz": repr(geom.ffs_dz),
    }


def geometry_from_dict(d: dict) -> ScanGeometry:
    """Inverse of :func:`geometry_to_dict`."""
    return ScanGeometry(
        source_radius=float(d["source_radius"]),
        source_detector_dist=float(d["source_detector_dist"]),
        n_views_per_rot=int(d["n_views_per_rot"]),
        n_rotations=int(d["n_rotations"]),
        n_det_rows=int(d["n_det_rows"]),
        n_det_cols=int(d["n_det_cols"]),
        det_col_spacing=float(d["det_col_spacing"]),
        det_row_spacing=float(d["det_row_spacing"]),
        pitch_z_per_rot=float(d["pitch_z_per_rot"]),
        ffs_mode=FfsMode(d.get("ffs_mode", "none")),
        ffs_dalpha=float(d.get("ffs_dalpha", 0.0)),
        ffs_dz=float(d.get("ffs_dz", 0.0)),
    )
