"""Time stepping for the nonlinear diffusion filter.

The production path is the lagged-diffusivity semi-implicit step, extended
to 2-D and 3-D by additive operator splitting (AOS)::

    U[n+1] = 1/s * sum_r (I - s*k*A_r(U[n]))^-1 U[n]

Each inverse is a batch of independent tridiagonal solves, one per grid
line along axis ``r``.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .diffusivity import BoundedStep, Diffusivity, Linear
from .errors import ConvergenceError, DegenerateMeanError, DominanceError, StabilityError
from .grid import ImageVolume, mean_grey, rel_dist_to_mean
from .operators import (
    TridiagonalSystem,
    assemble_axis_operator,
    assemble_jacobian_C,
    half_point_diffusivities,
)

log = logging.getLogger(__name__)

__all__ = [
    "Auto",
    "FilterConfig",
    "thomas_solve",
    "semi_implicit_step_1d",
    "picard_iterate",
    "PicardResult",
    "aos_step",
    "explicit_step",
    "explicit_limit",
    "filter_run",
    "Diagnostics",
    "StepRecord",
    "newton_diagnostic",
    "NewtonReport",
]

DOMINANCE_SLACK = 1e-9


@dataclass(frozen=True)
class Auto:
    """Pick the step count from the linear-diffusion settling time."""

    threshold: float = 0.02
    n_max: int = 10 ** 6


@dataclass(frozen=True)
class FilterConfig:
    """Parameters of a filter run.

    ``picard_depth`` counts fixed-point re-linearizations on top of the
    single semi-implicit solve; 0 is the semi-implicit scheme and anything
    larger is experimental.
    """

    k: float
    steps: Union[int, Auto] = field(default_factory=Auto)
    diffusivity: Diffusivity = field(default_factory=Linear)
    picard_depth: int = 0
    picard_tol: float = 1e-8

    def __post_init__(self):
        if not (self.k > 0 and math.isfinite(self.k)):
            raise ValueError(f"time step k must be positive, got {self.k}")
        if not isinstance(self.steps, Auto) and (int(self.steps) != self.steps or self.steps < 0):
            raise ValueError(f"steps must be a nonnegative integer or Auto, got {self.steps!r}")
        if self.picard_depth < 0:
            raise ValueError("picard_depth must be >= 0")
        if isinstance(self.diffusivity, BoundedStep):
            raise ValueError("the bounded step function cannot drive the solver")


# --- tridiagonal solves ---------------------------------------------------------

def thomas_solve(sys: TridiagonalSystem, rhs) -> np.ndarray:
    """Solve ``sys @ x = rhs`` for every line in the (possibly batched) system.

    The system must be diagonally dominant row by row, up to a relative
    slack of ``1e-9``; this holds for every ``I - kappa*A`` the filter
    builds, so a violation means an assembly bug and raises
    :class:`DominanceError` rather than returning garbage.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    if rhs.shape[-1] != sys.n:
        raise ValueError(f"rhs length {rhs.shape[-1]} does not match system size {sys.n}")
    lower, diag, upper = (np.asarray(x, dtype=np.float64) for x in (sys.lower, sys.diag, sys.upper))
    offsum = np.zeros(diag.shape)
    offsum[..., :-1] += np.abs(upper)
    offsum[..., 1:] += np.abs(lower)
    bad = (np.abs(diag) * (1.0 + DOMINANCE_SLACK) < offsum) | (diag == 0)
    if np.any(bad):
        raise DominanceError(f"system is not diagonally dominant in {int(np.count_nonzero(bad))} rows")

    shape = np.broadcast_shapes(diag.shape, rhs.shape)
    n = shape[-1]
    # march along the first axis so each slice is a contiguous batch
    a = np.moveaxis(np.broadcast_to(lower, shape[:-1] + (n - 1,)), -1, 0)
    b = np.moveaxis(np.broadcast_to(diag, shape), -1, 0)
    c = np.moveaxis(np.broadcast_to(upper, shape[:-1] + (n - 1,)), -1, 0)
    d = np.moveaxis(np.broadcast_to(rhs, shape), -1, 0)
    if sys.excess is not None and not (np.any(lower > 0) or np.any(upper > 0)):
        e = np.moveaxis(np.broadcast_to(sys.excess, shape), -1, 0)
        return np.moveaxis(_eliminate_mmatrix(-a, e, -c, d), 0, -1)
    return np.moveaxis(_eliminate(a, b, c, d), 0, -1)


def _eliminate(a, b, c, d):
    n = b.shape[0]
    cp = np.empty(c.shape)
    x = np.empty(d.shape)
    denom = b[0]
    if n > 1:
        cp[0] = c[0] / denom
    x[0] = d[0] / denom
    for i in range(1, n):
        denom = b[i] - a[i - 1] * cp[i - 1]
        if i < n - 1:
            cp[i] = c[i] / denom
        x[i] = (d[i] - a[i - 1] * x[i - 1]) / denom
    for i in range(n - 2, -1, -1):
        x[i] -= cp[i] * x[i + 1]
    return x


def _eliminate_mmatrix(lo, e, up, d):
    # lo, up >= 0 are the negated off-diagonals and e the row excess, so
    # pivot = excess + up with excess accumulated from positive terms only
    n = e.shape[0]
    cp = np.empty(up.shape)
    x = np.empty(d.shape)
    exc = e[0]
    for i in range(n):
        if i > 0:
            exc = e[i] + lo[i - 1] * exc / denom
        denom = exc + up[i] if i < n - 1 else exc
        if i < n - 1:
            cp[i] = up[i] / denom
        x[i] = d[i] / denom if i == 0 else (d[i] + lo[i - 1] * x[i - 1]) / denom
    for i in range(n - 2, -1, -1):
        x[i] += cp[i] * x[i + 1]
    return x


def _axis_solve(u, axis, h, kappa, spec, lin):
    um = np.moveaxis(u, axis, -1)
    gfield = half_point_diffusivities(np.moveaxis(lin, axis, -1), h, spec)
    sys = assemble_axis_operator(gfield, h).system(kappa)
    return np.moveaxis(thomas_solve(sys, um), -1, axis)


def _filtered_axes(shape):
    return [axis for axis, m in enumerate(shape) if m > 1]


def _aos(u, spacing, k, spec, lin=None):
    lin = u if lin is None else lin
    axes = _filtered_axes(u.shape)
    if not axes:
        return np.array(u, dtype=np.float64)
    s = len(axes)
    acc = np.zeros(u.shape)
    for axis in axes:
        acc += _axis_solve(u, axis, spacing[axis], s * k, spec, lin)
    return acc / s if s > 1 else acc


def semi_implicit_step_1d(line, h: float, k: float, spec: Diffusivity) -> np.ndarray:
    """One step ``(I - k A(U)) U_new = U`` along the last axis."""
    line = np.asarray(line, dtype=np.float64)
    if line.shape[-1] < 2:
        raise ValueError("a line needs at least two samples")
    return thomas_solve(assemble_axis_operator(half_point_diffusivities(line, h, spec), h).system(k), line)


def aos_step(v: ImageVolume, config: FilterConfig) -> ImageVolume:
    """One AOS step with ``A_r`` evaluated at the current image.

    Axes of length one are not filtered and do not count towards ``s``.
    """
    return v.with_data(_aos(v.data, v.spacing, config.k, config.diffusivity))


# --- Picard -----------------------------------------------------------------------

@dataclass
class PicardResult:
    u: Union[ImageVolume, np.ndarray]
    iterations: int
    residual: float
    converged: bool
    l1_norms: list = field(default_factory=list)


def picard_iterate(state, config: FilterConfig, max_iter: Optional[int] = None,
                   tol: Optional[float] = None, strict: bool = False) -> PicardResult:
    """Fixed-point iteration ``U[v+1] = Q(U[v]) U[n]`` started from ``U[n]``.

    ``Q`` is the AOS operator (the plain semi-implicit operator in 1-D).
    ``max_iter`` counts linear solves and defaults to ``picard_depth + 1``,
    so a single solve reproduces the semi-implicit step. Iteration stops
    once ``||U[v+1] - U[v]||_2 <= tol``. With ``strict`` a missing
    convergence raises :class:`ConvergenceError`; otherwise it is reported
    through ``converged``.
    """
    as_line = not isinstance(state, ImageVolume)
    v = ImageVolume(state) if as_line else state
    max_iter = config.picard_depth + 1 if max_iter is None else int(max_iter)
    tol = config.picard_tol if tol is None else tol
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")

    un = v.data
    cur = un
    norms = []
    residual = math.inf
    it = 0
    converged = False
    while it < max_iter:
        nxt = _aos(un, v.spacing, config.k, config.diffusivity, lin=cur)
        it += 1
        norms.append(float(np.abs(nxt).sum()))
        residual = float(np.linalg.norm((nxt - cur).ravel()))
        cur = nxt
        if residual <= tol:
            converged = True
            break
    if max_iter == 1:
        converged = True
    if strict and not converged:
        raise ConvergenceError(f"Picard iteration not converged after {it} solves", residual)
    out = cur if as_line else v.with_data(cur)
    return PicardResult(out, it, residual, converged, norms)


# --- explicit oracle --------------------------------------------------------------------

def explicit_limit(v: ImageVolume, spec: Diffusivity) -> float:
    """Largest explicit time step keeping ``I + kA`` nonnegative."""
    rate = 0.0
    for axis in _filtered_axes(v.dims):
        h = v.spacing[axis]
        gfield = half_point_diffusivities(np.moveaxis(v.data, axis, -1), h, spec)
        rate += 2.0 * float(gfield.max()) / (h * h)
    return math.inf if rate == 0 else 1.0 / rate


def explicit_step(v: ImageVolume, config: FilterConfig) -> ImageVolume:
    """Forward Euler ``U + k A(U) U``; kept as a test oracle."""
    limit = explicit_limit(v, config.diffusivity)
    if config.k > limit * (1.0 + 1e-12):
        raise StabilityError(f"k={config.k} exceeds the explicit stability limit {limit:.6g}")
    out = np.array(v.data, dtype=np.float64)
    for axis in _filtered_axes(v.dims):
        h = v.spacing[axis]
        um = np.moveaxis(v.data, axis, -1)
        A = assemble_axis_operator(half_point_diffusivities(um, h, config.diffusivity), h)
        out += config.k * np.moveaxis(A.matvec(um), -1, axis)
    return v.with_data(out)


# --- full run -----------------------------------------------------------------------------

@dataclass(frozen=True)
class StepRecord:
    step: int
    mean: float
    min: float
    max: float
    rel_dist_to_mean: float


def _record(step, v):
    try:
        rel = rel_dist_to_mean(v)
    except DegenerateMeanError:
        rel = math.nan
    return StepRecord(step, mean_grey(v), float(v.data.min()), float(v.data.max()), rel)


@dataclass
class Diagnostics:
    steps: int
    records: list = field(default_factory=list)
    settling: object = None

    CSV_HEADER = ("step", "mean", "min", "max", "rel_dist_to_mean")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        for r in self.records:
            w.writerow([r.step, repr(r.mean), repr(r.min), repr(r.max), repr(r.rel_dist_to_mean)])
        return buf.getvalue()


def filter_run(v: ImageVolume, config: FilterConfig,
               callback: Optional[Callable[[int, ImageVolume], None]] = None):
    """Run the filter for a fixed or automatically chosen number of steps.

    With ``steps=Auto(...)`` the count is the settling time of linear
    diffusion at the same ``k``. The diffusivity is re-evaluated at the
    current iterate every step. Returns ``(filtered, diagnostics)``; the
    diagnostics start with a row for the input (step 0).
    """
    settling = None
    if isinstance(config.steps, Auto):
        from .stopping import settling_time

        settling = settling_time(v, config.k, config.steps.threshold, config.steps.n_max)
        n = settling.n
    else:
        n = int(config.steps)

    diag = Diagnostics(n, [_record(0, v)], settling)
    cur = v
    for step in range(1, n + 1):
        if config.picard_depth == 0:
            cur = aos_step(cur, config)
        else:
            res = picard_iterate(cur, config)
            if not res.converged:
                log.warning("step %d: Picard residual %.3g after %d solves", step, res.residual, res.iterations)
            cur = res.u
        diag.records.append(_record(step, cur))
        if callback is not None:
            callback(step, cur)
    return cur, diag


# --- Newton diagnostic ------------------------------------------------------------------

@dataclass
class NewtonReport:
    spd: bool
    min_pivot: float
    newton: TridiagonalSystem
    picard: TridiagonalSystem


def _ldl_pivots(sys: TridiagonalSystem) -> np.ndarray:
    piv = np.empty(sys.n)
    piv[0] = sys.diag[0]
    for i in range(1, sys.n):
        if piv[i - 1] == 0:
            # factorization broke down; the matrix is not positive definite
            piv[i:] = -math.inf
            break
        piv[i] = sys.diag[i] - sys.lower[i - 1] * sys.upper[i - 1] / piv[i - 1]
    return piv


def newton_diagnostic(line, h: float, k: float, spec: Diffusivity) -> NewtonReport:
    """Check whether the Newton iteration matrix ``I - k(A + C)`` stays positive definite.

    Both matrices are symmetric tridiagonal, so positive definiteness is
    equivalent to all pivots of the unpivoted LDL^T factorization being
    positive. The report carries the smallest pivot and both matrices.
    """
    line = np.asarray(line, dtype=np.float64)
    A = assemble_axis_operator(half_point_diffusivities(line, h, spec), h)
    C = assemble_jacobian_C(line, h, spec)
    J = TridiagonalSystem(A.lower + C.lower, A.diag + C.diag, A.upper + C.upper)
    newton = J.system(k)
    piv = _ldl_pivots(newton)
    min_pivot = float(np.min(piv))
    return NewtonReport(bool(np.all(piv > 0)), min_pivot, newton, A.system(k))
