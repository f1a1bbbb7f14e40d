"""Ray-driven forward projection of a volume into a native cone sinogram.

Sampling is Joseph-style: each ray marches from the source to its detector
cell in fixed steps (default half a voxel) and accumulates trilinearly
interpolated values times the step length. Samples outside the volume
contribute zero. Every output cell is written by exactly one worker, so the
result is independent of the thread count.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

from . import geometry as geo
from .core import Sinogram, SinogramLayout, Volume


class ProjectionConfigError(ValueError):
    """Volume and geometry are inconsistent (e.g. z extent not covered)."""


@njit(cache=True, inline="always")
def _trilerp(vol, nx, ny, nz, gx, gy, gz):
    """Trilinear sample at fractional voxel coords; zero outside the grid."""
    if gx <= -1.0 or gy <= -1.0 or gz <= -1.0:
        return 0.0
    if gx >= nx or gy >= ny or gz >= nz:
        return 0.0
    ix = int(math.floor(gx))
    iy = int(math.floor(gy))
    iz = int(math.floor(gz))
    fx = gx - ix
    fy = gy - iy
    fz = gz - iz
    acc = 0.0
    for dz in range(2):
        kz = iz + dz
        if kz < 0 or kz >= nz:
            continue
        wz = fz if dz == 1 else 1.0 - fz
        for dy in range(2):
            ky = iy + dy
            if ky < 0 or ky >= ny:
                continue
            wy = fy if dy == 1 else 1.0 - fy
            for dx in range(2):
                kx = ix + dx
                if kx < 0 or kx >= nx:
                    continue
                wx = fx if dx == 1 else 1.0 - fx
                acc += vol[kz, ky, kx] * wz * wy * wx
    return acc


@njit(cache=True, inline="always")
def _slab_clip(p0, p1, lo, hi, u0, u1):
    """Clip parameter range [u0, u1] of segment p0->p1 against slab [lo, hi]."""
    d = p1 - p0
    if d == 0.0:
        if p0 < lo or p0 > hi:
            return 1.0, 0.0
        return u0, u1
    ua = (lo - p0) / d
    ub = (hi - p0) / d
    if ua > ub:
        ua, ub = ub, ua
    return max(u0, ua), min(u1, ub)


@njit(parallel=True, cache=True)
def _forward_kernel(vol, ox, oy, oz, vs, src, det0, alphas, gammas, heights,
                    R, step_mm, out):
    n_views, n_rows, n_cols = out.shape
    nz, ny, nx = vol.shape
    # volume support box (outer faces of the boundary voxels)
    x_lo = ox - 0.5 * vs
    y_lo = oy - 0.5 * vs
    z_lo = oz - 0.5 * vs
    x_hi = ox + (nx - 0.5) * vs
    y_hi = oy + (ny - 0.5) * vs
    z_hi = oz + (nz - 0.5) * vs
    n_rays = n_views * n_rows * n_cols
    for r in prange(n_rays):
        v = r // (n_rows * n_cols)
        rem = r - v * (n_rows * n_cols)
        i = rem // n_cols
        j = rem - i * n_cols
        ab = alphas[v] + gammas[j]
        dx = det0[v, 0] + R * math.sin(ab) - src[v, 0]
        dy = det0[v, 1] - R * math.cos(ab) - src[v, 1]
        dz = det0[v, 2] + heights[i] - src[v, 2]
        u0, u1 = _slab_clip(src[v, 0], src[v, 0] + dx, x_lo, x_hi, 0.0, 1.0)
        u0, u1 = _slab_clip(src[v, 1], src[v, 1] + dy, y_lo, y_hi, u0, u1)
        u0, u1 = _slab_clip(src[v, 2], src[v, 2] + dz, z_lo, z_hi, u0, u1)
        if u1 <= u0:
            out[v, i, j] = 0.0
            continue
        ray_len = math.sqrt(dx * dx + dy * dy + dz * dz)
        seg_len = (u1 - u0) * ray_len
        n_steps = int(math.ceil(seg_len / step_mm))
        if n_steps < 1:
            n_steps = 1
        du = (u1 - u0) / n_steps
        acc = 0.0
        for k in range(n_steps):
            u = u0 + (k + 0.5) * du
            qx = src[v, 0] + u * dx
            qy = src[v, 1] + u * dy
            qz = src[v, 2] + u * dz
            gx = (qx - ox) / vs
            gy = (qy - oy) / vs
            gz = (qz - oz) / vs
            acc += _trilerp(vol, nx, ny, nz, gx, gy, gz)
        out[v, i, j] = acc * du * ray_len


def forward_project(vol: Volume, geom: geo.ScanGeometry,
                    step_fraction: float = 0.5) -> Sinogram:
    """Project ``vol`` at every view of ``geom`` (FFS-aware).

    The volume is interpreted in the scan frame: its ``origin`` is taken
    relative to the scan isocenter, so a grid centred on (0,0,0) is scanned
    symmetrically. Raises :class:`ProjectionConfigError` if the helix does
    not cover the volume's z extent.
    """
    if vol.data.size == 0:
        raise ProjectionConfigError("empty volume")
    shift = geo.iso_center(geom)
    origin = vol.origin + shift
    nz = vol.data.shape[0]
    z_lo = origin[2] - 0.5 * vol.voxel_size
    z_hi = origin[2] + (nz - 0.5) * vol.voxel_size
    span = geom.pitch_z_per_rot * geom.n_rotations
    h = geom.half_height_iso
    if z_lo < -h or z_hi > span + h:
        raise ProjectionConfigError(
            f"volume z extent [{z_lo:.1f}, {z_hi:.1f}] mm exceeds scanned "
            f"range [{-h:.1f}, {span + h:.1f}] mm")
    n_views = geom.n_views
    src = np.empty((n_views, 3))
    det0 = np.empty((n_views, 3))
    alphas = geom.view_angles()
    for v in range(n_views):
        src[v] = geo.source_position(geom, v).position
        det0[v] = geo.spiral_point(geom, alphas[v])
    out = np.empty((n_views, geom.n_det_rows, geom.n_det_cols))
    _forward_kernel(vol.data, origin[0], origin[1], origin[2],
                    float(vol.voxel_size), src, det0, alphas,
                    geom.fan_angles(), geom.row_heights(),
                    float(geom.source_detector_dist),
                    float(step_fraction * vol.voxel_size), out)
    return Sinogram(out, geom, SinogramLayout.NATIVE_CONE)
