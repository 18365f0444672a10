"""Settling-time stopping rule.

The nonlinear filter behaves linearly wherever the squared slope is below
its threshold, so the number of steps is taken from the linear problem:
the first ``n`` at which linear AOS diffusion with the production time step
brings the image within ``threshold`` relative distance of its mean.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffusivity import Linear
from .errors import DegenerateMeanError, NotSettledError
from .grid import ImageVolume, mean_grey
from .solver import _aos

__all__ = ["SettlingResult", "settling_time"]


@dataclass(frozen=True)
class SettlingResult:
    n: int
    T: float
    ratio: float


def settling_time(v: ImageVolume, k: float, threshold: float = 0.02,
                  n_max: int = 10 ** 6) -> SettlingResult:
    """Smallest ``n >= 0`` with ``||U[n] - mu|| / ||mu|| <= threshold`` under linear diffusion.

    Parameters
    ----------
    v : ImageVolume
        Initial image; its mean must be nonzero.
    k : float
        AOS time step, the same one used for the nonlinear run.
    threshold : float
        Relative Euclidean distance to the mean image.
    n_max : int
        Upper bound on the search.

    Returns
    -------
    SettlingResult
        ``n``, the settling time ``T = n*k`` and the ratio reached at ``n``.

    Raises
    ------
    DegenerateMeanError
        If the mean grey level is zero.
    NotSettledError
        If the criterion is still violated after ``n_max`` steps.
    """
    if not k > 0:
        raise ValueError(f"time step must be positive, got {k}")
    mu = mean_grey(v)
    if mu == 0.0:
        raise DegenerateMeanError("mean grey level is zero; settling ratio undefined")
    ref_norm = abs(mu) * math.sqrt(v.size)
    spec = Linear()
    u = v.data
    ratio = float(np.linalg.norm((u - mu).ravel())) / ref_norm
    n = 0
    while ratio > threshold:
        if n >= n_max:
            raise NotSettledError(
                f"ratio {ratio:.4g} still above {threshold} after {n} steps", ratio=ratio, steps=n
            )
        u = _aos(u, v.spacing, k, spec)
        n += 1
        ratio = float(np.linalg.norm((u - mu).ravel())) / ref_norm
    return SettlingResult(n, n * k, ratio)
