"""Raw-array file format: float32 payload plus a plain-text sidecar.

A stored array is two files: ``NAME`` holds little-endian 32-bit floats in C
order (last index fastest), and ``NAME.hdr`` holds one ``key=value`` pair per
line — dtype, shape, and whatever metadata the writer attached (geometry
block with ``geom.`` prefix, parallel grid with ``grid.``, spacing, origin,
seed, stage). Everything is diffable and language-neutral.
"""

from __future__ import annotations

import os

import numpy as np

from .core import Sinogram, SinogramLayout, Volume
from .geometry import geometry_from_dict, geometry_to_dict
from .rebin import ParallelGrid

DTYPE_TAG = "f32le"


class ArrayIOError(Exception):
    """Base class; ``code`` identifies the failure kind."""

    code = "io"


class MissingSidecarError(ArrayIOError):
    code = "missing-sidecar"


class UnknownDtypeError(ArrayIOError):
    code = "unknown-dtype"


class PayloadLengthError(ArrayIOError):
    code = "length-mismatch"


def _sidecar(path: str) -> str:
    return path + ".hdr"


def save_array(path: str, data: np.ndarray, meta: dict | None = None):
    """Write payload + sidecar; metadata values are stringified as-is."""
    data = np.ascontiguousarray(data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(data.tobytes())
    lines = [f"dtype={DTYPE_TAG}",
             "shape=" + ",".join(str(n) for n in data.shape)]
    for k, v in (meta or {}).items():
        lines.append(f"{k}={v}")
    with open(_sidecar(path), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_array(path: str) -> tuple[np.ndarray, dict]:
    """Read payload + sidecar back; raises a distinct error per defect."""
    side = _sidecar(path)
    if not os.path.exists(side):
        raise MissingSidecarError(f"no sidecar {side}")
    meta: dict[str, str] = {}
    with open(side) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, v = line.split("=", 1)
            meta[k] = v
    if meta.get("dtype") != DTYPE_TAG:
        raise UnknownDtypeError(f"dtype {meta.get('dtype')!r} not supported")
    shape = tuple(int(n) for n in meta["shape"].split(","))
    expect = 4 * int(np.prod(shape))
    raw = open(path, "rb").read()
    if len(raw) != expect:
        raise PayloadLengthError(
            f"payload is {len(raw)} bytes, sidecar shape {shape} needs "
            f"{expect}")
    data = np.frombuffer(raw, dtype="<f4").reshape(shape)
    return data, meta


def _collect(meta: dict, prefix: str) -> dict:
    plen = len(prefix)
    return {k[plen:]: v for k, v in meta.items() if k.startswith(prefix)}


def save_sinogram(path: str, sino: Sinogram, stage: str = "",
                  seed: int | None = None):
    meta = {"kind": "sinogram", "layout": sino.layout.value}
    if stage:
        meta["stage"] = stage
    if seed is not None:
        meta["seed"] = str(seed)
    for k, v in geometry_to_dict(sino.geom).items():
        meta[f"geom.{k}"] = v
    if sino.grid is not None:
        for k, v in sino.grid.to_dict().items():
            meta[f"grid.{k}"] = v
    save_array(path, sino.data, meta)


def load_sinogram(path: str) -> Sinogram:
    data, meta = load_array(path)
    if meta.get("kind") != "sinogram":
        raise ArrayIOError(f"{path} is not a sinogram (kind="
                           f"{meta.get('kind')!r})")
    geom = geometry_from_dict(_collect(meta, "geom."))
    layout = SinogramLayout(meta.get("layout", "native"))
    grid_d = _collect(meta, "grid.")
    grid = ParallelGrid.from_dict(grid_d) if grid_d else None
    return Sinogram(np.asarray(data, dtype=np.float64), geom, layout,
                    grid=grid)


def save_volume(path: str, vol: Volume, stage: str = "",
                seed: int | None = None):
    meta = {"kind": "volume", "spacing": repr(vol.voxel_size),
            "origin": ",".join(repr(float(v)) for v in vol.origin)}
    if stage:
        meta["stage"] = stage
    if seed is not None:
        meta["seed"] = str(seed)
    save_array(path, vol.data, meta)


def load_volume(path: str) -> Volume:
    data, meta = load_array(path)
    if meta.get("kind") != "volume":
        raise ArrayIOError(f"{path} is not a volume (kind="
                           f"{meta.get('kind')!r})")
    origin = np.array([float(v) for v in meta["origin"].split(",")])
    return Volume(np.asarray(data, dtype=np.float64),
                  float(meta["spacing"]), origin)
