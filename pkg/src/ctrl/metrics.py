"""Image quality metrics and the composite training reward.

The reward of a candidate image I against ground truth `gt` is

    T(I) = GSSIM(I, gt) + 1 / (MSE_roi(I, gt) + 1)

with both arrays normalized to [0, 1] by the ground-truth range first, GSSIM
being SSIM evaluated on gradient-magnitude maps, and the mean squared error
taken over the region-of-interest mask. A perfect image scores exactly 2.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter


@dataclass(frozen=True)
class QualityReport:
    psnr: float
    ssim: float
    gssim: float
    reward: float

    def as_row(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim,
                "gssim": self.gssim, "reward": self.reward}


def _check_shapes(a: np.ndarray, ref: np.ndarray):
    if a.shape != ref.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {ref.shape}")


def psnr(a: np.ndarray, ref: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _check_shapes(a, ref)
    if peak <= 0:
        raise ValueError("peak must be > 0")
    mse = float(np.mean((a - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a: np.ndarray, ref: np.ndarray, peak: float = 1.0,
         window: int = 11, k1: float = 0.01, k2: float = 0.03,
         mask: np.ndarray | None = None) -> float:
    """Mean local structural similarity with a Gaussian window (sigma 1.5).

    Works on arrays of any dimensionality; every axis must be at least
    ``window`` long. ``mask`` restricts the averaging of the local SSIM map.
    """
    a = np.asarray(a, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _check_shapes(a, ref)
    if any(n < window for n in a.shape):
        raise ValueError(f"inputs must be at least {window} per axis")
    sigma = 1.5
    truncate = ((window - 1) // 2) / sigma
    blur = lambda x: gaussian_filter(x, sigma, truncate=truncate,
                                     mode="reflect")
    mu1 = blur(a)
    mu2 = blur(ref)
    s11 = blur(a * a) - mu1 * mu1
    s22 = blur(ref * ref) - mu2 * mu2
    s12 = blur(a * ref) - mu1 * mu2
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    smap = num / den
    if mask is not None:
        if mask.shape != a.shape:
            raise ValueError("mask shape mismatch")
        if not mask.any():
            raise ValueError("empty mask")
        return float(smap[mask].mean())
    return float(smap.mean())


def gradient_magnitude(a: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude, any dimensionality."""
    grads = np.gradient(np.asarray(a, dtype=np.float64))
    if a.ndim == 1:
        grads = [grads]
    return np.sqrt(sum(g * g for g in grads))


def gssim(a: np.ndarray, ref: np.ndarray, peak: float = 1.0,
          mask: np.ndarray | None = None) -> float:
    """SSIM evaluated on gradient-magnitude maps (same constants)."""
    a = np.asarray(a, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _check_shapes(a, ref)
    return ssim(gradient_magnitude(a), gradient_magnitude(ref), peak=peak,
                mask=mask)


def normalize_pair(img: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray,
                                                             np.ndarray]:
    """Map both arrays through the ground truth's [min, max] -> [0, 1]."""
    gt = np.asarray(gt, dtype=np.float64)
    img = np.asarray(img, dtype=np.float64)
    lo = float(gt.min())
    rng = float(gt.max()) - lo
    if rng <= 0:
        rng = 1.0
    return (img - lo) / rng, (gt - lo) / rng


def reward(img: np.ndarray, gt: np.ndarray,
           roi_mask: np.ndarray | None = None) -> float:
    """Composite target reward in (0, 2]; exactly 2 for a perfect image."""
    img = np.asarray(img, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_shapes(img, gt)
    if roi_mask is None:
        roi_mask = np.ones(gt.shape, dtype=bool)
    if roi_mask.shape != gt.shape:
        raise ValueError("roi mask shape mismatch")
    if not roi_mask.any():
        raise ValueError("empty roi mask")
    a, r = normalize_pair(img, gt)
    mse_roi = float(np.mean((a[roi_mask] - r[roi_mask]) ** 2))
    return gssim(a, r, peak=1.0) + 1.0 / (mse_roi + 1.0)


def quality_report(img: np.ndarray, gt: np.ndarray,
                   roi_mask: np.ndarray | None = None) -> QualityReport:
    """All four metrics on ground-truth-normalized data (peak = 1)."""
    a, r = normalize_pair(img, gt)
    if roi_mask is None:
        roi_mask = np.ones(gt.shape, dtype=bool)
    mse_roi = float(np.mean((a[roi_mask] - r[roi_mask]) ** 2))
    g = gssim(a, r, peak=1.0)
    return QualityReport(
        psnr=psnr(a[roi_mask], r[roi_mask], peak=1.0),
        ssim=ssim(a, r, peak=1.0, mask=roi_mask),
        gssim=g,
        reward=g + 1.0 / (mse_roi + 1.0),
    )


def append_report(path: str, stage: str, report: QualityReport):
    """Append one CSV row (stage, psnr, ssim, gssim, reward)."""
    fresh = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(["stage", "psnr", "ssim", "gssim", "reward"])
        writer.writerow([stage, repr(report.psnr), repr(report.ssim),
                         repr(report.gssim), repr(report.reward)])
