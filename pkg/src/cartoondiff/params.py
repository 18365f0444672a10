"""Data-driven choice of the diffusivity parameters.

``gamma`` comes from a robust scale estimate of the initial gradient
magnitudes; ``p`` is tuned by maximizing the F-measure of the filtered
image's edges against a ground-truth edge map.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .diffusivity import Proposed
from .edges import EdgeMap, detect_edges, f_measure, precision_recall
from .grid import ImageVolume
from .operators import gradient_magnitude
from .solver import FilterConfig, filter_run
from .stopping import settling_time

__all__ = [
    "MAD_TO_SIGMA",
    "GAMMA_FLOOR",
    "DegenerateImageWarning",
    "mad",
    "gamma_from_magnitudes",
    "estimate_gamma",
    "parse_p_grid",
    "PRecord",
    "TuningReport",
    "tune_p",
]

MAD_TO_SIGMA = 1.4826
GAMMA_FLOOR = 1e-8


class DegenerateImageWarning(UserWarning):
    """The gradient statistics are degenerate (typically a constant image)."""


def mad(values) -> float:
    """Median absolute deviation; even lengths use the mean of the two middle values."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("median absolute deviation of an empty sample")
    return float(np.median(np.abs(x - np.median(x))))


def gamma_from_magnitudes(magnitudes) -> float:
    """``(1.4826 * MAD(magnitudes))**2``, floored at ``GAMMA_FLOOR`` with a warning."""
    gamma = (MAD_TO_SIGMA * mad(magnitudes)) ** 2
    if gamma < GAMMA_FLOOR:
        warnings.warn(
            f"gradient MAD is degenerate (gamma={gamma:.3g}); using floor {GAMMA_FLOOR}",
            DegenerateImageWarning,
            stacklevel=2,
        )
        return GAMMA_FLOOR
    return gamma


def estimate_gamma(v: ImageVolume) -> float:
    """Threshold ``gamma`` from the robust spread of ``|grad U|`` of the input image."""
    return gamma_from_magnitudes(gradient_magnitude(v))


def parse_p_grid(text: str) -> list[float]:
    """Parse ``start:step:stop`` (inclusive) or a comma list into ascending p values."""
    text = text.strip()
    if ":" in text:
        try:
            start, step, stop = (float(x) for x in text.split(":"))
        except ValueError:
            raise ValueError(f"p grid must be start:step:stop, got {text!r}") from None
        if step <= 0:
            raise ValueError("p grid step must be positive")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        grid = [round(start + i * step, 12) for i in range(count)]
    else:
        grid = [float(x) for x in text.split(",") if x.strip()]
    _check_grid(grid)
    return grid


def _check_grid(grid):
    if not grid:
        raise ValueError("empty p grid")
    if any(p <= 1 for p in grid):
        raise ValueError("every p must be > 1")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("p grid must be strictly ascending")


@dataclass(frozen=True)
class PRecord:
    p: float
    precision: float
    recall: float
    f_measure: float
    n_used: int
    flagged: bool = False


@dataclass
class TuningReport:
    p_grid: list
    records: list
    p_star: float
    f_star: float
    f0: float
    gamma: float
    n: int
    flags: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["p", "precision", "recall", "f_measure", "n"])
        for r in self.records:
            w.writerow([repr(r.p), repr(r.precision), repr(r.recall), repr(r.f_measure), r.n_used])
        return buf.getvalue()

    def summary(self) -> str:
        return (f"p*={self.p_star!r} F(p*)={self.f_star:.6f} F0={self.f0:.6f} "
                f"gamma={self.gamma:.6g} n={self.n}")


def _score(truth, image, alpha, tolerance, edge_kw):
    detected = detect_edges(image, **edge_kw)
    precision, recall = precision_recall(truth, detected, tolerance)
    if math.isnan(precision) or math.isnan(recall):
        return (0.0 if math.isnan(precision) else precision,
                0.0 if math.isnan(recall) else recall, 0.0, True)
    return precision, recall, f_measure(precision, recall, alpha), False


def tune_p(v: ImageVolume, ground_truth: EdgeMap, p_grid: Sequence[float], k: float,
           alpha: float = 0.5, *, gamma: Optional[float] = None, n: Optional[int] = None,
           tolerance: int = 0, threads: int = 1, edge_kw: Optional[dict] = None) -> TuningReport:
    """Sweep ``p`` over ``p_grid`` and keep the value with the best F-measure.

    ``gamma`` (MAD estimate) and the step count ``n`` (settling time at
    ``k``) are computed once from the input unless given. Ties go to the
    smallest ``p``. An empty detected edge set scores ``F = 0`` and is
    flagged in the record.
    """
    if ground_truth.dims != v.dims:
        raise ValueError(f"ground truth {ground_truth.dims} does not match image {v.dims}")
    grid = [float(p) for p in p_grid]
    _check_grid(grid)
    edge_kw = dict(edge_kw or {})
    if gamma is None:
        gamma = estimate_gamma(v)
    if n is None:
        n = settling_time(v, k).n

    def run(p):
        cfg = FilterConfig(k=k, steps=n, diffusivity=Proposed(gamma, p))
        out, _ = filter_run(v, cfg)
        precision, recall, f, flagged = _score(ground_truth, out, alpha, tolerance, edge_kw)
        return PRecord(p, precision, recall, f, n, flagged)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(run, grid))
    else:
        records = [run(p) for p in grid]

    best = max(range(len(records)), key=lambda i: (records[i].f_measure, -i))
    f0 = _score(ground_truth, v, alpha, tolerance, edge_kw)[2]
    flags = [f"p={r.p!r}: no edges detected" for r in records if r.flagged]
    return TuningReport(grid, records, records[best].p, records[best].f_measure, f0, gamma, n, flags)

