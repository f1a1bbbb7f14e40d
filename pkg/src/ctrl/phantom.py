"""Analytic ellipsoid phantoms, exact line integrals, and dose noise.

Ellipsoid coordinates are expressed in the phantom frame, whose origin is the
scan isocenter (see :func:`ctrl.geometry.iso_center`); densities are additive
attenuation per mm of path. The closed-form projector here is the oracle the
numeric ray-tracing projector is validated against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .core import Sinogram, Volume, centered_volume


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    density: float

    def __post_init__(self):
        if any(a <= 0 for a in self.semi_axes):
            raise ValueError("semi_axes must be > 0")


@dataclass(frozen=True)
class PhantomSpec:
    ellipsoids: tuple[Ellipsoid, ...]
    volume_shape: tuple[int, int, int] = (64, 64, 64)   # (nx, ny, nz)
    voxel_size: float = 1.0

    def __post_init__(self):
        if any(n < 8 for n in self.volume_shape):
            raise ValueError("volume_shape must be at least 8 per axis")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be > 0")


def voxelize(spec: PhantomSpec) -> Volume:
    """Ground-truth volume: each voxel sums the densities covering its centre.

    The grid is centred on the phantom-frame origin.
    """
    nx, ny, nz = spec.volume_shape
    vs = spec.voxel_size
    x = (np.arange(nx) - 0.5 * (nx - 1)) * vs
    y = (np.arange(ny) - 0.5 * (ny - 1)) * vs
    z = (np.arange(nz) - 0.5 * (nz - 1)) * vs
    zz, yy, xx = np.meshgrid(z, y, x, indexing="ij")
    data = np.zeros((nz, ny, nx))
    for e in spec.ellipsoids:
        cx, cy, cz = e.center
        ax, ay, az = e.semi_axes
        inside = (((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2
                  + ((zz - cz) / az) ** 2) <= 1.0
        data[inside] += e.density
    if data.min() < 0.0 or data.max() > 2.0:
        raise ValueError("voxelized densities leave the [0, 2] range")
    return centered_volume(data, vs)


def ellipsoid_line_integral(e: Ellipsoid, p0: np.ndarray,
                            d: np.ndarray) -> np.ndarray:
    """Exact chord length x density of rays ``p0 + u*d`` through ``e``.

    ``p0``/``d`` broadcast over leading axes; ``d`` need not be normalised
    (the chord is measured in world units regardless).
    """
    c = np.asarray(e.center, dtype=np.float64)
    axes = np.asarray(e.semi_axes, dtype=np.float64)
    o = (p0 - c) / axes
    dd = d / axes
    a = np.sum(dd * dd, axis=-1)
    b = 2.0 * np.sum(o * dd, axis=-1)
    cc = np.sum(o * o, axis=-1) - 1.0
    disc = b * b - 4.0 * a * cc
    hit = disc > 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    chord_param = np.where(hit, sq / a, 0.0)       # u2 - u1
    return e.density * chord_param * np.linalg.norm(d, axis=-1)


def analytic_projection(spec: PhantomSpec, geom: geo.ScanGeometry,
                        view: int) -> np.ndarray:
    """Exact projection of the ellipsoid phantom for one view (rows x cols).

    Rays run from the (possibly FFS-deflected) source to the gantry-fixed
    detector cells; ellipsoid centres are placed relative to the scan
    isocenter.
    """
    if not 0 <= view < geom.n_views:
        raise IndexError(f"view {view} out of range [0, {geom.n_views})")
    pose = geo.source_position(geom, view)
    src = pose.position
    alpha = pose.alpha
    R = geom.source_detector_dist
    gam = geom.fan_angles()
    t = geom.row_heights()
    nominal = geo.spiral_point(geom, alpha)
    ab = alpha + gam
    det = np.empty((geom.n_det_rows, geom.n_det_cols, 3))
    det[:, :, 0] = nominal[0] + R * np.sin(ab)[None, :]
    det[:, :, 1] = nominal[1] - R * np.cos(ab)[None, :]
    det[:, :, 2] = nominal[2] + t[:, None]
    d = det - src[None, None, :]
    shift = geo.iso_center(geom)
    out = np.zeros((geom.n_det_rows, geom.n_det_cols))
    for e in spec.ellipsoids:
        e_world = Ellipsoid(tuple(np.asarray(e.center) + shift),
                            e.semi_axes, e.density)
        out += ellipsoid_line_integral(e_world, src[None, None, :], d)
    return out


def analytic_sinogram(spec: PhantomSpec, geom: geo.ScanGeometry) -> Sinogram:
    """Stack :func:`analytic_projection` over all views."""
    data = np.empty((geom.n_views, geom.n_det_rows, geom.n_det_cols))
    for v in range(geom.n_views):
        data[v] = analytic_projection(spec, geom, v)
    return Sinogram(data, geom)


def inject_low_dose_noise(sino: Sinogram, i0: float, seed: int) -> Sinogram:
    """Simulate photon-starved acquisition of a noiseless sinogram.

    Transmitted counts are Poisson with mean ``i0 * exp(-p)`` per ray; the
    returned values are ``-log(max(counts, 1) / i0)``. The one-count floor
    avoids log(0) on fully absorbed rays. Deterministic for a fixed seed.
    """
    if i0 <= 0:
        raise ValueError("i0 must be > 0")
    p = sino.data
    if p.min() < 0:
        raise ValueError("line integrals must be >= 0 before noise injection")
    rng = np.random.default_rng(seed)
    counts = rng.poisson(i0 * np.exp(-p)).astype(np.float64)
    noisy = -np.log(np.maximum(counts, 1.0) / i0)
    return sino.with_data(noisy)


def parse_phantom_text(text: str) -> PhantomSpec:
    """Parse the plain-text phantom format.

    Optional ``shape=nx,ny,nz`` and ``voxel_size=s`` directives, then one
    ellipsoid per line: ``cx cy cz ax ay az density``. ``#`` starts a comment.
    """
    shape = (64, 64, 64)
    voxel = 1.0
    ellipsoids = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, val = (s.strip() for s in line.split("=", 1))
            if key == "shape":
                parts = [int(v) for v in val.replace(",", " ").split()]
                if len(parts) != 3:
                    raise ValueError(f"line {lineno}: shape needs 3 ints")
                shape = tuple(parts)
            elif key == "voxel_size":
                voxel = float(val)
            else:
                raise ValueError(f"line {lineno}: unknown directive {key!r}")
            continue
        parts = [float(v) for v in line.split()]
        if len(parts) != 7:
            raise ValueError(
                f"line {lineno}: expected 'cx cy cz ax ay az density'")
        ellipsoids.append(Ellipsoid(tuple(parts[0:3]), tuple(parts[3:6]),
                                    parts[6]))
    return PhantomSpec(tuple(ellipsoids), shape, voxel)


def format_phantom_text(spec: PhantomSpec) -> str:
    """Inverse of :func:`parse_phantom_text`."""
    lines = [f"shape={spec.volume_shape[0]},{spec.volume_shape[1]},"
             f"{spec.volume_shape[2]}",
             f"voxel_size={spec.voxel_size!r}"]
    for e in spec.ellipsoids:
        vals = list(e.center) + list(e.semi_axes) + [e.density]
        lines.append(" ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"
