"""Synthetic spine phantoms, augmentation, and volume file I/O.

SSV1 layout (little-endian)::

    b"SSV1" | u8 dtype (0 = float64 intensities, 1 = uint8 labels) | u8 ndim
    | ndim x u32 extents | row-major payload
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, GeometryError, ShapeError, TruncationError

BACKGROUND, BODY, DISC, CANAL = 0, 1, 2, 3
CLASS_NAMES: Dict[int, str] = {
    BACKGROUND: "background",
    BODY: "vertebral body",
    DISC: "intervertebral disc",
    CANAL: "canal",
}

# per-class intensity means; bodies bright, discs dimmer, canal dark
_INTENSITY = {BACKGROUND: 0.25, BODY: 1.0, DISC: 0.6, CANAL: -0.4}


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (32, 32, 32)
    n_vertebrae: int = 3
    noise_sigma: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise GeometryError(f"phantom dims must be three positive extents, got {self.dims}")
        if self.n_vertebrae < 0:
            raise ConfigError("n_vertebrae must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


def generate_phantom(spec: PhantomSpec, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``(volume[H,W,D] float64, labels[H,W,D] uint8)``, a pure function of ``(spec, seed)``.

    Vertebral bodies are ellipsoids stacked along D, discs fill the gaps
    between neighbouring bodies, and the canal is a tube running along D
    behind the column.
    """
    h, w, d = spec.dims
    n = spec.n_vertebrae
    if n > 0 and (h < 8 or w < 8 or d < 4 * n):
        raise GeometryError(
            f"dims {spec.dims} cannot fit {n} vertebrae (need H, W >= 8 and D >= {4 * n})"
        )
    rng = np.random.default_rng(seed)
    labels = np.zeros(spec.dims, dtype=np.uint8)
    ii, jj, kk = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, np.arange(d) + 0.5, indexing="ij")

    if n > 0:
        cy = h * rng.uniform(0.38, 0.44)
        cx = w * rng.uniform(0.46, 0.54)
        ry = h * 0.20 * rng.uniform(0.9, 1.1)
        rx = w * 0.24 * rng.uniform(0.9, 1.1)
        period = d / n
        body_half = 0.34 * period
        radial = ((ii - cy) / ry) ** 2 + ((jj - cx) / rx) ** 2

        # discs: elliptical slabs spanning the column, overwritten by bodies
        disc_r = 0.85 * rng.uniform(0.95, 1.05)
        labels[(radial <= disc_r**2) & (kk >= 0.1 * period) & (kk <= d - 0.1 * period)] = DISC

        for v in range(n):
            cz = (v + 0.5) * period
            s = rng.uniform(0.92, 1.08)
            body = radial / s**2 + ((kk - cz) / (body_half * s)) ** 2 <= 1.0
            labels[body] = BODY

        canal_r = max(1.6, 0.085 * min(h, w))
        canal_y = cy + ry + canal_r + 0.6
        if canal_y + canal_r > h - 0.5:
            canal_y = h - 0.5 - canal_r
        canal = ((ii - canal_y) ** 2 + (jj - cx) ** 2) <= canal_r**2
        labels[canal] = CANAL

    means = {c: m + rng.normal(0.0, 0.03) for c, m in _INTENSITY.items()}
    vol = np.zeros(spec.dims, dtype=np.float64)
    for c, m in means.items():
        vol[labels == c] = m
    # smooth intensity drift over the field, then white noise
    drift = ndimage.gaussian_filter(rng.normal(0.0, 1.0, spec.dims), sigma=4.0, mode="wrap")
    vol += 0.5 * spec.noise_sigma * drift / max(np.abs(drift).max(), 1e-12)
    vol += rng.normal(0.0, spec.noise_sigma, spec.dims) if spec.noise_sigma > 0 else 0.0
    return vol, labels


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    rotate_max_deg: float = 0.0
    crop_fraction: float = 1.0
    contrast_gamma_range: Tuple[float, float] = (1.0, 1.0)
    denoise: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ConfigError(f"crop_fraction must lie in (0, 1], got {self.crop_fraction}")
        lo, hi = self.contrast_gamma_range
        if not 0.0 < lo <= hi:
            raise ConfigError(f"contrast_gamma_range must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if self.rotate_max_deg < 0:
            raise ConfigError("rotate_max_deg must be >= 0")


def rotate90(vol: np.ndarray, k: int, axes: Tuple[int, int]) -> np.ndarray:
    return np.ascontiguousarray(np.rot90(vol, k, axes=axes))


def gamma_contrast(vol: np.ndarray, gamma: float) -> np.ndarray:
    lo, hi = vol.min(), vol.max()
    if gamma == 1.0 or hi <= lo:
        return vol.copy()
    return lo + (hi - lo) * ((vol - lo) / (hi - lo)) ** gamma


def augment(vol: np.ndarray, labels: np.ndarray, spec: AugmentSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Denoise, gamma remap, 90-degree rotation, crop-and-pad, in that order.

    Labels follow only the geometric steps, so class ids are never mixed.
    """
    if vol.shape != labels.shape or vol.ndim != 3:
        raise ShapeError(f"volume {vol.shape} and labels {labels.shape} must be matching 3D grids")
    rng = np.random.default_rng(spec.seed)
    out_v = vol.astype(np.float64, copy=True)
    out_l = labels.copy()

    if spec.denoise:
        out_v = ndimage.uniform_filter(out_v, size=3, mode="nearest")

    lo, hi = spec.contrast_gamma_range
    gamma = lo if lo == hi else rng.uniform(lo, hi)
    out_v = gamma_contrast(out_v, gamma)

    max_turns = int(spec.rotate_max_deg // 90)
    turns = int(rng.integers(0, min(max_turns, 3) + 1)) if max_turns else 0
    pairs = [p for p in ((0, 1), (0, 2), (1, 2)) if out_v.shape[p[0]] == out_v.shape[p[1]]]
    axes = pairs[int(rng.integers(0, len(pairs)))] if pairs else None
    if turns and axes is not None:
        out_v = rotate90(out_v, turns, axes)
        out_l = rotate90(out_l, turns, axes)

    if spec.crop_fraction < 1.0:
        sizes = [int(round(spec.crop_fraction * n)) for n in out_v.shape]
        if min(sizes) < 1:
            raise GeometryError(f"crop_fraction {spec.crop_fraction} leaves less than one voxel")
        starts = [int(rng.integers(0, n - s + 1)) for n, s in zip(out_v.shape, sizes)]
        window = tuple(slice(a, a + s) for a, s in zip(starts, sizes))
        keep = np.zeros(out_v.shape, dtype=bool)
        keep[window] = True
        out_v = np.where(keep, out_v, 0.0)
        out_l = np.where(keep, out_l, 0).astype(labels.dtype)
    return out_v, out_l


# ---------------------------------------------------------------------------
# SSV1 files
# ---------------------------------------------------------------------------

SSV_MAGIC = b"SSV1"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("u1")}


def write_volume(path: str, array: np.ndarray) -> None:
    """Float arrays are stored as float64 intensities, integer arrays as uint8 labels."""
    array = np.asarray(array)
    if np.issubdtype(array.dtype, np.floating):
        code, payload = 0, array.astype("<f8")
    elif np.issubdtype(array.dtype, np.integer) or array.dtype == bool:
        if array.size and (array.min() < 0 or array.max() > 255):
            raise ValueError("label volumes must fit in uint8")
        code, payload = 1, array.astype("u1")
    else:
        raise TypeError(f"cannot store dtype {array.dtype}")
    if not 1 <= array.ndim <= 255:
        raise ValueError("ndim must be in [1, 255]")
    header = SSV_MAGIC + struct.pack("<BB", code, array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(payload).tobytes())


def read_volume(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 6:
        raise TruncationError("file too short for an SSV1 header", len(blob))
    if blob[:4] != SSV_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {SSV_MAGIC!r}", 0)
    code, ndim = blob[4], blob[5]
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", 4)
    if ndim < 1:
        raise FormatError("ndim must be >= 1", 5)
    header_end = 6 + 4 * ndim
    if len(blob) < header_end:
        raise TruncationError("header declares more extents than the file holds", len(blob))
    shape = struct.unpack_from(f"<{ndim}I", blob, 6)
    dtype = _DTYPES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = len(blob) - header_end
    if actual != expected:
        raise TruncationError(
            f"header declares {expected} payload bytes for shape {shape}, file holds {actual}",
            header_end + min(actual, expected),
        )
    arr = np.frombuffer(blob, dtype=dtype, offset=header_end).reshape(shape)
    return arr.astype(np.float64) if code == 0 else arr.copy()


# ---------------------------------------------------------------------------
# slice export
# ---------------------------------------------------------------------------

PALETTE = np.array(
    [
        (0, 0, 0),
        (230, 200, 60),
        (60, 160, 230),
        (220, 60, 60),
        (90, 200, 110),
        (180, 90, 200),
        (240, 140, 40),
        (200, 200, 200),
    ],
    dtype=np.uint8,
)


def write_pgm(path: str, image: np.ndarray) -> None:
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def write_ppm(path: str, image: np.ndarray) -> None:
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def to_gray(vol: np.ndarray) -> np.ndarray:
    """Map the whole volume's intensity range linearly onto 0..255."""
    lo, hi = float(vol.min()), float(vol.max())
    if hi <= lo:
        return np.zeros(vol.shape, dtype=np.uint8)
    return np.round((vol - lo) / (hi - lo) * 255.0).astype(np.uint8)


def colorize(labels: np.ndarray) -> np.ndarray:
    return PALETTE[np.asarray(labels, dtype=np.int64) % len(PALETTE)]


def export_slices(vol, labels, pred, axis: int, out_dir: str,
                  indices: Optional[Sequence[int]] = None, prefix: str = "slice"):
    """Write an input / truth / prediction image triple for each slice index.

    Defaults to the middle slice. Returns the list of written paths.
    """
    if vol.ndim != 3:
        raise ShapeError(f"expected a 3D volume, got {vol.shape}")
    if not 0 <= axis < 3:
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    for name, arr in (("labels", labels), ("prediction", pred)):
        if arr is not None and arr.shape != vol.shape:
            raise ShapeError(f"{name} shape {arr.shape} differs from volume {vol.shape}")
    if indices is None:
        indices = [vol.shape[axis] // 2]
    os.makedirs(out_dir, exist_ok=True)
    gray = to_gray(vol)
    written = []
    for idx in indices:
        stem = os.path.join(out_dir, f"{prefix}_ax{axis}_{idx:04d}")
        write_pgm(stem + "_input.pgm", np.take(gray, idx, axis=axis))
        written.append(stem + "_input.pgm")
        for tag, arr in (("truth", labels), ("pred", pred)):
            if arr is None:
                continue
            write_ppm(f"{stem}_{tag}.ppm", colorize(np.take(arr, idx, axis=axis)))
            written.append(f"{stem}_{tag}.ppm")
    return written
