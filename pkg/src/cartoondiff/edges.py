"""Canny-style edge maps and precision/recall scoring."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

from .grid import ImageVolume

__all__ = [
    "EdgeMap",
    "detect_edges",
    "detect_edges_slices",
    "precision_recall",
    "f_measure",
    "edge_map_from_volume",
]

# magnitudes at or below this count as zero (intensities live in [0, 1])
ZERO_GRADIENT = 1e-9
# rounding applied to magnitudes so that sign flips of the image give identical maps
_MAG_DECIMALS = 10

# neighbour offsets for gradient directions 0, 45, 90 and 135 degrees
_OFFSETS = ((0, 1), (1, 1), (1, 0), (1, -1))


@dataclass(frozen=True)
class EdgeMap:
    mask: np.ndarray

    def __post_init__(self):
        mask = np.array(self.mask, dtype=bool, copy=True)
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def dims(self):
        return self.mask.shape

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.mask))

    def to_volume(self) -> ImageVolume:
        return ImageVolume(self.mask.astype(np.float64))


def edge_map_from_volume(v: ImageVolume) -> EdgeMap:
    """Binary edge map from a loaded image: any nonzero pixel is an edge."""
    return EdgeMap(v.data > 0)


def _shift(a, dr, dc):
    # out[r, c] = a[r + dr, c + dc], zero outside the image
    out = np.zeros_like(a)
    rows, cols = a.shape
    r0, r1 = max(0, -dr), min(rows, rows - dr)
    c0, c1 = max(0, -dc), min(cols, cols - dc)
    out[r0:r1, c0:c1] = a[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
    return out


def detect_edges(v: ImageVolume, sigma: float = 1.0, high_percentile: float = 90.0,
                 low_ratio: float = 0.4) -> EdgeMap:
    """Canny edge detector on a 2-D image.

    Gaussian smoothing (kernel truncated at 3 sigma, reflective borders),
    central-difference gradient, non-maximum suppression along the gradient
    direction quantized to 45 degrees, then hysteresis. The high threshold
    is the ``high_percentile`` of the nonzero gradient magnitudes and the
    low threshold ``low_ratio`` times that.

    On a plateau of equal magnitudes across the edge the pixel on the
    negative side of the direction is kept, so a step between two columns
    marks the column before the jump.
    """
    if v.ndim != 2:
        raise ValueError(f"edge detection needs a 2-D image, got {v.ndim}-D")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    smooth = ndi.gaussian_filter(v.data, sigma, mode="reflect", truncate=3.0)
    gy, gx = np.gradient(smooth)
    gy = np.round(gy, _MAG_DECIMALS)
    gx = np.round(gx, _MAG_DECIMALS)
    mag = np.round(np.hypot(gx, gy), _MAG_DECIMALS)

    nonzero = mag > ZERO_GRADIENT
    if not np.any(nonzero):
        return EdgeMap(np.zeros(v.dims, dtype=bool))

    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (((angle + 22.5) // 45.0).astype(int)) % 4
    keep = np.zeros(v.dims, dtype=bool)
    for s, (dr, dc) in enumerate(_OFFSETS):
        sel = sector == s
        before = _shift(mag, -dr, -dc)
        after = _shift(mag, dr, dc)
        keep |= sel & (mag > before) & (mag >= after)
    keep &= nonzero

    high = float(np.percentile(mag[nonzero], high_percentile))
    low = low_ratio * high
    weak = keep & (mag >= low)
    strong = keep & (mag >= high)
    labels, nlab = ndi.label(weak, structure=np.ones((3, 3), dtype=bool))
    if nlab == 0:
        return EdgeMap(np.zeros(v.dims, dtype=bool))
    hit = np.zeros(nlab + 1, dtype=bool)
    hit[labels[strong]] = True
    hit[0] = False
    return EdgeMap(hit[labels])


def detect_edges_slices(v: ImageVolume, axis: int = 0, **kwargs) -> np.ndarray:
    """Edge masks of every 2-D slice of a 3-D volume taken across ``axis``."""
    if v.ndim != 3:
        raise ValueError("slice-wise edge detection expects a 3-D volume")
    data = np.moveaxis(v.data, axis, 0)
    masks = [detect_edges(ImageVolume(sl), **kwargs).mask for sl in data]
    return np.moveaxis(np.stack(masks), 0, axis)


def precision_recall(truth: EdgeMap, detected: EdgeMap, tolerance: int = 0) -> tuple[float, float]:
    """Pixel-coincidence precision and recall of ``detected`` against ``truth``.

    ``tolerance > 0`` accepts a match within that Chebyshev distance. An
    empty detected set makes precision undefined and an empty truth set
    makes recall undefined; both are returned as NaN.
    """
    if truth.dims != detected.dims:
        raise ValueError(f"edge map shapes differ: {truth.dims} vs {detected.dims}")
    t, d = truth.mask, detected.mask
    if tolerance > 0:
        st = np.ones((2 * tolerance + 1,) * t.ndim, dtype=bool)
        hit_d = np.count_nonzero(d & ndi.binary_dilation(t, st))
        hit_t = np.count_nonzero(t & ndi.binary_dilation(d, st))
    else:
        hit_d = hit_t = np.count_nonzero(t & d)
    nd, nt = np.count_nonzero(d), np.count_nonzero(t)
    precision = hit_d / nd if nd else math.nan
    recall = hit_t / nt if nt else math.nan
    return precision, recall


def f_measure(precision: float, recall: float, alpha: float = 0.5) -> float:
    """Weighted harmonic mean ``P R / (alpha R + (1 - alpha) P)``; 0 when ``P = R = 0``."""
    for name, x in (("precision", precision), ("recall", recall), ("alpha", alpha)):
        if not 0.0 <= x <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {x}")
    if precision == 0.0 and recall == 0.0:
        return 0.0
    denom = alpha * recall + (1.0 - alpha) * precision
    if denom == 0.0:
        # alpha = 1 with R = 0, or alpha = 0 with P = 0
        return 0.0
    return precision * recall / denom
