"""Weighted filtered backprojection for helical cone-beam data.

Two paths share the preweight/ramp machinery:

* :func:`reconstruct_parallel` — the main path. Works on rebinned
  cone-parallel sinograms that have been preweighted and ramp-filtered.
  Voxel-driven: every voxel accumulates bilinear samples of the filtered
  views inside its per-slice angular window, then is scaled by
  ``pi / (sum of view weights * dtheta)``.
* :func:`reconstruct_native` — a coarse reference path operating directly in
  native cone geometry with per-voxel inverse-square distance weighting. It
  preweights and ramp-filters internally and refuses grids above 64^3.

Per-slice angular windows are the largest whole number of half-turns the
detector z-coverage allows, centred on the view whose source passes the
slice; slices with less than half a turn of coverage are masked out (their
voxels are zero, never NaN).
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from . import geometry as geo
from .core import Sinogram, SinogramLayout, Volume

log = logging.getLogger(__name__)


class RampWindow(enum.Enum):
    RAM_LAK = "ramlak"
    HANN = "hann"


class ViewWeight(enum.Enum):
    UNIFORM = "uniform"
    TRIANGULAR_FEATHER = "feather"


class ReconConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ReconConfig:
    """Reconstruction options.

    ``beta_range`` overrides the per-slice angular window with one explicit
    (beta_min, beta_max) pair for every slice; by default the window is
    derived from detector z-coverage. ``feather`` is the taper width (rad)
    used by the TRIANGULAR_FEATHER view weighting.
    """

    ramp_window: RampWindow = RampWindow.RAM_LAK
    view_weight: ViewWeight = ViewWeight.UNIFORM
    beta_range: tuple[float, float] | None = None
    feather: float = 0.5 * math.pi

    def __post_init__(self):
        if self.beta_range is not None:
            lo, hi = self.beta_range
            if hi - lo < math.pi:
                raise ReconConfigError(
                    "beta_range must span at least pi (half a turn)")
        if not 0.0 < self.feather <= math.pi:
            raise ReconConfigError("feather must be in (0, pi]")


# ---------------------------------------------------------------------------
# preweighting


def preweight(sino: Sinogram) -> Sinogram:
    """Apply the geometry weights that precede ramp filtering.

    Native cone data is scaled by cos(cone angle) * cos(fan angle); rebinned
    cone-parallel data by cos(cone angle) = R / sqrt(R^2 + Z^2), where Z is
    the row height on the detector cylinder of radius R.
    """
    geom = sino.geom
    R = geom.source_detector_dist
    t = geom.row_heights()
    cos_cone = R / np.sqrt(R * R + t * t)
    if sino.layout is SinogramLayout.NATIVE_CONE:
        w = cos_cone[:, None] * np.cos(geom.fan_angles())[None, :]
    else:
        w = np.repeat(cos_cone[:, None], sino.data.shape[2], axis=1)
    return sino.with_data(sino.data * w[None, :, :])


# ---------------------------------------------------------------------------
# ramp filtering


def ramp_kernel(n: int, spacing: float,
                window: RampWindow = RampWindow.RAM_LAK) -> np.ndarray:
    """Spatial impulse response of the discrete ramp filter (length ``n``).

    The centre tap sits at index ``n // 2``; the kernel already includes the
    radial sample spacing, so plain convolution with it reproduces
    :func:`ramp_filter`.
    """
    resp, m = _ramp_response(n, spacing, window)
    imp = np.zeros(m)
    imp[0] = 1.0
    full = np.fft.irfft(np.fft.rfft(imp) * resp, m)
    half = n // 2
    return np.concatenate([full[m - half:], full[:n - half]])


def _ramp_response(n: int, spacing: float,
                   window: RampWindow) -> tuple[np.ndarray, int]:
    """Frequency response on a zero-padded grid (DC bin forced to zero).

    Generous padding keeps the object's mean out of the zeroed DC bin: the
    constant removed per line scales with 1/m, so 8x padding makes the
    DC-free filter indistinguishable from the unmodified discrete ramp while
    still rejecting constants exactly.
    """
    m = 1
    while m < 8 * n:
        m *= 2
    k = np.zeros(m)
    k[0] = 1.0 / (4.0 * spacing * spacing)
    odd = np.arange(1, m // 2, 2)
    k[odd] = -1.0 / (math.pi * odd * spacing) ** 2
    k[m - odd] = k[odd]
    resp = np.real(np.fft.rfft(k)) * spacing
    resp[0] = 0.0
    if window is RampWindow.HANN:
        f = np.arange(resp.size) / (resp.size - 1)
        resp *= 0.5 * (1.0 + np.cos(math.pi * f))
    return resp, m


def _ramp_lines(lines: np.ndarray, spacing: float,
                window: RampWindow) -> np.ndarray:
    """Convolve every last-axis line with the discrete ramp kernel.

    Lines are edge-replicated into the padded FFT window, so a constant line
    filters to exactly zero and truncated projections see no artificial edge
    step.
    """
    n = lines.shape[-1]
    resp, m = _ramp_response(n, spacing, window)
    pl = (m - n) // 2
    padded = np.empty(lines.shape[:-1] + (m,), dtype=np.float64)
    padded[..., pl:pl + n] = lines
    padded[..., :pl] = lines[..., :1]
    padded[..., pl + n:] = lines[..., -1:]
    spec = np.fft.rfft(padded, axis=-1)
    return np.fft.irfft(spec * resp, m, axis=-1)[..., pl:pl + n]


def ramp_filter(sino: Sinogram,
                window: RampWindow = RampWindow.RAM_LAK) -> Sinogram:
    """Ramp-filter every (view, row) radial line of a cone-parallel sinogram.

    Zero-phase, linear, DC-free; optional Hann apodization for noisy data.
    """
    if sino.layout is not SinogramLayout.CONE_PARALLEL:
        raise ValueError("ramp_filter expects a cone-parallel sinogram")
    if sino.grid is None:
        raise ValueError("rebinned sinogram is missing its parallel grid")
    if sino.grid.n_s < 4:
        raise ReconConfigError("need at least 4 radial samples to filter")
    return sino.with_data(_ramp_lines(sino.data, sino.grid.s_spacing, window))


# ---------------------------------------------------------------------------
# per-slice angular windows


def _slice_windows(geom: geo.ScanGeometry, cfg: ReconConfig,
                   z_world: np.ndarray, theta_spacing: float, n_thetas: int):
    """Angular window, per-view weights and scale for every slice.

    Returns (kmin, kmax, wlo, whi, feather, scale, covered); views
    kmin..kmax-1 contribute, with trapezoid weights ramping over ``feather``
    rad inside [wlo, whi].
    """
    pitch = geom.pitch_z_per_rot
    total = 2.0 * math.pi * geom.n_rotations
    feather = cfg.feather if cfg.view_weight is ViewWeight.TRIANGULAR_FEATHER \
        else 0.0
    nz = z_world.size
    kmin = np.zeros(nz, dtype=np.int64)
    kmax = np.zeros(nz, dtype=np.int64)
    wlo = np.zeros(nz)
    whi = np.zeros(nz)
    scale = np.zeros(nz)
    covered = np.zeros(nz, dtype=np.bool_)
    k_cov = geom.half_height_iso * 2.0 * math.pi / pitch
    for iz, z in enumerate(z_world):
        if cfg.beta_range is not None:
            lo, hi = cfg.beta_range
        else:
            beta_c = 2.0 * math.pi * z / pitch
            m = int(math.floor((2.0 * k_cov - feather) / math.pi))
            if m < 1:
                continue
            half = 0.5 * (m * math.pi + feather)
            lo, hi = beta_c - half, beta_c + half
        lo, hi = max(lo, 0.0), min(hi, total)
        if hi - lo < math.pi:
            continue
        k0 = int(math.ceil(lo / theta_spacing))
        k1 = int(math.floor(hi / theta_spacing)) + 1
        k0, k1 = max(k0, 0), min(k1, n_thetas)
        if k1 <= k0:
            continue
        th = np.arange(k0, k1) * theta_spacing
        if feather > 0.0:
            w = np.minimum(1.0, np.minimum((th - lo) / feather,
                                           (hi - th) / feather))
            w = np.maximum(w, 0.0)
        else:
            w = np.ones(th.size)
        wsum = w.sum()
        if wsum <= 0.0:
            continue
        kmin[iz], kmax[iz] = k0, k1
        wlo[iz], whi[iz] = lo, hi
        # pi/(beta_max - beta_min) * sum(w * s_hat) * dtheta == pi * mean_w
        scale[iz] = math.pi / wsum
        covered[iz] = True
    if not covered.all():
        log.warning("recon: %d of %d slices lack half-turn coverage; masked",
                    int(np.count_nonzero(~covered)), nz)
    return kmin, kmax, wlo, whi, feather, scale, covered


# ---------------------------------------------------------------------------
# parallel-path backprojection


@njit(parallel=True, cache=True)
def _bp_parallel_kernel(filt, theta_spacing, s0, ds, t0, dt, r_s, R, pitch,
                        ox, oy, oz, vs, kmin, kmax, wlo, whi, feather,
                        scale, covered, out):
    nz, ny, nx = out.shape
    n_thetas, n_rows, n_s = filt.shape
    for flat in prange(nz * ny):
        iz = flat // ny
        iy = flat - iz * ny
        if not covered[iz]:
            for ix in range(nx):
                out[iz, iy, ix] = 0.0
            continue
        z = oz + iz * vs
        y = oy + iy * vs
        for ix in range(nx):
            x = ox + ix * vs
            acc = 0.0
            for k in range(kmin[iz], kmax[iz]):
                theta = k * theta_spacing
                ct = math.cos(theta)
                st = math.sin(theta)
                s = x * ct + y * st
                fs = (s - s0) / ds
                if fs < 0.0 or fs > n_s - 1.0:
                    continue
                sg = s / r_s
                if sg > 1.0 or sg < -1.0:
                    continue
                cosg = math.sqrt(1.0 - sg * sg)
                sina = st * cosg - ct * sg
                cosa = ct * cosg + st * sg
                alpha = theta - math.asin(sg)
                z_src = pitch * alpha / (2.0 * math.pi)
                # in-plane distance from source to voxel along the ray
                # direction (sin theta, -cos theta)
                l = (x + r_s * sina) * st - (y - r_s * cosa) * ct
                if l <= 1e-9:
                    continue
                ft = ((z - z_src) * R / l - t0) / dt
                if ft < 0.0 or ft > n_rows - 1.0:
                    continue
                i0 = int(ft)
                if i0 > n_rows - 2:
                    i0 = n_rows - 2
                j0 = int(fs)
                if j0 > n_s - 2:
                    j0 = n_s - 2
                fi = ft - i0
                fj = fs - j0
                val = ((1.0 - fi) * (1.0 - fj) * filt[k, i0, j0]
                       + (1.0 - fi) * fj * filt[k, i0, j0 + 1]
                       + fi * (1.0 - fj) * filt[k, i0 + 1, j0]
                       + fi * fj * filt[k, i0 + 1, j0 + 1])
                if feather > 0.0:
                    w = (theta - wlo[iz]) / feather
                    w2 = (whi[iz] - theta) / feather
                    if w2 < w:
                        w = w2
                    if w > 1.0:
                        w = 1.0
                    if w < 0.0:
                        w = 0.0
                    acc += w * val
                else:
                    acc += val
            out[iz, iy, ix] = acc * scale[iz]


def reconstruct_parallel(sino: Sinogram, cfg: ReconConfig,
                         shape: tuple[int, int, int],
                         voxel_size: float = 1.0) -> Volume:
    """Voxel-driven FBP of a preweighted, ramp-filtered cone-parallel stack.

    ``shape`` is (nx, ny, nz); the grid is centred on the scan isocenter.
    The returned volume carries a boolean ``coverage`` mask; slices without
    half-turn coverage are zero and masked.
    """
    if sino.layout is not SinogramLayout.CONE_PARALLEL or sino.grid is None:
        raise ValueError("reconstruct_parallel expects a rebinned sinogram")
    geom = sino.geom
    grid = sino.grid
    nx, ny, nz = shape
    center = geo.iso_center(geom)
    origin = np.array([center[0] - 0.5 * (nx - 1) * voxel_size,
                       center[1] - 0.5 * (ny - 1) * voxel_size,
                       center[2] - 0.5 * (nz - 1) * voxel_size])
    z_world = origin[2] + voxel_size * np.arange(nz)
    kmin, kmax, wlo, whi, feather, scale, covered = _slice_windows(
        geom, cfg, z_world, grid.theta_spacing, grid.n_thetas)
    out = np.zeros((nz, ny, nx))
    s = grid.s_values()
    t = geom.row_heights()
    _bp_parallel_kernel(sino.data, grid.theta_spacing, s[0], grid.s_spacing,
                        t[0] if t.size else 0.0, geom.det_row_spacing,
                        geom.source_radius, geom.source_detector_dist,
                        geom.pitch_z_per_rot, origin[0], origin[1],
                        origin[2], voxel_size, kmin, kmax, wlo, whi,
                        feather, scale, covered, out)
    vol = Volume(out, voxel_size, origin - center)
    vol.coverage = np.broadcast_to(covered[:, None, None], out.shape).copy()
    return vol


# ---------------------------------------------------------------------------
# native-geometry reference path


@njit(parallel=True, cache=True)
def _bp_native_kernel(filt, view_spacing, gamma0, dgamma, t0, dt, r_s, R,
                      pitch, ox, oy, oz, vs, kmin, kmax, wlo, whi, feather,
                      scale, covered, literal_axial_term, out):
    nz, ny, nx = out.shape
    n_views, n_rows, n_cols = filt.shape
    for flat in prange(nz * ny):
        iz = flat // ny
        iy = flat - iz * ny
        if not covered[iz]:
            for ix in range(nx):
                out[iz, iy, ix] = 0.0
            continue
        z = oz + iz * vs
        y = oy + iy * vs
        for ix in range(nx):
            x = ox + ix * vs
            acc = 0.0
            for k in range(kmin[iz], kmax[iz]):
                alpha = k * view_spacing
                sina = math.sin(alpha)
                cosa = math.cos(alpha)
                qx = x + r_s * sina
                qy = y - r_s * cosa
                # fan angle of the voxel, measured from the central ray
                ux = sina
                uy = -cosa
                dot = ux * qx + uy * qy
                if dot <= 1e-9:
                    continue
                cross = ux * qy - uy * qx
                gamma = math.atan2(cross, dot)
                fj = (gamma - gamma0) / dgamma
                if fj < 0.0 or fj > n_cols - 1.0:
                    continue
                lsq_true = qx * qx + qy * qy
                beta = alpha - 0.5 * math.pi
                term1 = r_s + x * math.cos(beta) + y * math.sin(beta)
                if literal_axial_term:
                    term2 = -x * math.sin(beta) + y * math.sin(beta)
                else:
                    term2 = -x * math.sin(beta) + y * math.cos(beta)
                lsq = term1 * term1 + term2 * term2
                if lsq <= 1e-12:
                    continue
                z_src = pitch * alpha / (2.0 * math.pi)
                fi = ((z - z_src) * R / math.sqrt(lsq_true) - t0) / dt
                if fi < 0.0 or fi > n_rows - 1.0:
                    continue
                i0 = int(fi)
                if i0 > n_rows - 2:
                    i0 = n_rows - 2
                j0 = int(fj)
                if j0 > n_cols - 2:
                    j0 = n_cols - 2
                wi = fi - i0
                wj = fj - j0
                val = ((1.0 - wi) * (1.0 - wj) * filt[k, i0, j0]
                       + (1.0 - wi) * wj * filt[k, i0, j0 + 1]
                       + wi * (1.0 - wj) * filt[k, i0 + 1, j0]
                       + wi * wj * filt[k, i0 + 1, j0 + 1])
                val *= r_s * r_s / lsq
                if feather > 0.0:
                    w = (alpha - wlo[iz]) / feather
                    w2 = (whi[iz] - alpha) / feather
                    if w2 < w:
                        w = w2
                    if w > 1.0:
                        w = 1.0
                    if w < 0.0:
                        w = 0.0
                    acc += w * val
                else:
                    acc += val
            out[iz, iy, ix] = acc * scale[iz]


def reconstruct_native(sino: Sinogram, cfg: ReconConfig,
                       shape: tuple[int, int, int], voxel_size: float = 1.0,
                       literal_axial_term: bool = False) -> Volume:
    """Direct cone-beam FBP in native geometry (coarse reference path).

    Preweights (cos cone * cos fan) and ramp-filters internally, then
    backprojects with the per-voxel ``r_s^2 / L^2`` distance weight. ``L`` is
    the in-plane source-to-voxel distance; ``literal_axial_term`` switches
    its second squared term from ``(-x sin b + y cos b)`` to the
    ``(-x sin b + y sin b)`` variant so both forms can be compared.

    Intended for coarse cross-checks only; grids above 64 per axis are
    refused.
    """
    if sino.layout is not SinogramLayout.NATIVE_CONE:
        raise ValueError("reconstruct_native expects a native cone sinogram")
    if max(shape) > 64:
        raise ReconConfigError("native reference path refuses grids > 64^3")
    geom = sino.geom
    pw = preweight(sino)
    filt = _ramp_lines(pw.data, geom.source_radius * geom.det_col_spacing,
                       cfg.ramp_window)
    nx, ny, nz = shape
    center = geo.iso_center(geom)
    origin = np.array([center[0] - 0.5 * (nx - 1) * voxel_size,
                       center[1] - 0.5 * (ny - 1) * voxel_size,
                       center[2] - 0.5 * (nz - 1) * voxel_size])
    z_world = origin[2] + voxel_size * np.arange(nz)
    kmin, kmax, wlo, whi, feather, scale, covered = _slice_windows(
        geom, cfg, z_world, geom.view_spacing, geom.n_views)
    gam = geom.fan_angles()
    t = geom.row_heights()
    out = np.zeros((nz, ny, nx))
    _bp_native_kernel(filt, geom.view_spacing, gam[0], geom.det_col_spacing,
                      t[0] if t.size else 0.0, geom.det_row_spacing,
                      geom.source_radius, geom.source_detector_dist,
                      geom.pitch_z_per_rot, origin[0], origin[1], origin[2],
                      voxel_size, kmin, kmax, wlo, whi, feather, scale,
                      covered, literal_axial_term, out)
    vol = Volume(out, voxel_size, origin - center)
    vol.coverage = np.broadcast_to(covered[:, None, None], out.shape).copy()
    return vol
