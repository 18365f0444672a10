"""Assembly of the per-axis tridiagonal diffusion operators.

All routines work on the last array axis and broadcast over any leading
axes, so a whole image can be assembled as a stack of lines at once.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .diffusivity import Diffusivity
from .grid import ImageVolume

__all__ = [
    "TridiagonalSystem",
    "squared_slopes",
    "half_point_diffusivities",
    "assemble_axis_operator",
    "assemble_jacobian_C",
    "gradient_magnitude",
]


@dataclass(frozen=True)
class TridiagonalSystem:
    """Tridiagonal matrix (or stack of them) stored by diagonals.

    ``lower[..., i]`` is entry ``(i+1, i)`` and ``upper[..., i]`` entry
    ``(i, i+1)``. ``kappa == 0`` tags a raw operator ``A``; ``kappa > 0``
    tags the system matrix ``I - kappa*A``.

    ``excess`` optionally holds the exact row excess
    ``diag - |lower| - |upper|`` of an M-matrix (all ones for
    ``I - kappa*A``). When present the solver never forms ``diag`` and
    avoids the cancellation that large ``kappa`` would otherwise cause.
    """

    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray
    kappa: float = 0.0
    excess: Optional[np.ndarray] = None

    def __post_init__(self):
        n = self.diag.shape[-1]
        if self.lower.shape[-1] != n - 1 or self.upper.shape[-1] != n - 1:
            raise ValueError(
                f"off-diagonals must have length {n - 1}, got "
                f"{self.lower.shape[-1]} and {self.upper.shape[-1]}"
            )

    @property
    def n(self) -> int:
        return self.diag.shape[-1]

    def system(self, kappa: float) -> "TridiagonalSystem":
        """``I - kappa*A`` built from a raw operator."""
        if self.kappa != 0.0:
            raise ValueError("system() expects a raw operator")
        return TridiagonalSystem(
            -kappa * self.lower,
            1.0 - kappa * self.diag,
            -kappa * self.upper,
            kappa,
            excess=np.ones(self.diag.shape),
        )

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = self.diag * x
        y[..., :-1] += self.upper * x[..., 1:]
        y[..., 1:] += self.lower * x[..., :-1]
        return y

    def row_sums(self) -> np.ndarray:
        s = self.diag.copy()
        s[..., :-1] += self.upper
        s[..., 1:] += self.lower
        return s

    def to_dense(self) -> np.ndarray:
        if self.diag.ndim != 1:
            raise ValueError("to_dense() is only defined for a single line")
        return np.diag(self.diag) + np.diag(self.upper, 1) + np.diag(self.lower, -1)


def squared_slopes(line, h: float = 1.0) -> np.ndarray:
    """``(U[i+1] - U[i])**2 / h**2`` at the half points."""
    return np.diff(np.asarray(line, dtype=np.float64), axis=-1) ** 2 / (h * h)


def half_point_diffusivities(line, h: float, spec: Diffusivity) -> np.ndarray:
    """Diffusivity at the midpoints between neighbouring samples."""
    line = np.asarray(line, dtype=np.float64)
    if line.shape[-1] < 2:
        raise ValueError("a line needs at least two samples")
    if not h > 0:
        raise ValueError(f"spacing must be positive, got {h}")
    return np.asarray(spec.g(squared_slopes(line, h)), dtype=np.float64)


def assemble_axis_operator(gfield, h: float) -> TridiagonalSystem:
    """Raw 1-D operator ``A`` from half-point diffusivities, Neumann ends.

    Off-diagonals are ``g_i/h**2``; the diagonal makes every row sum vanish.
    """
    gfield = np.asarray(gfield, dtype=np.float64)
    if gfield.shape[-1] < 1:
        raise ValueError("need at least one half-point diffusivity")
    off = gfield / (h * h)
    diag = np.zeros(gfield.shape[:-1] + (gfield.shape[-1] + 1,))
    diag[..., :-1] -= off
    diag[..., 1:] -= off
    return TridiagonalSystem(off.copy(), diag, off.copy(), 0.0)


def assemble_jacobian_C(line, h: float, spec: Diffusivity) -> TridiagonalSystem:
    """Correction ``C`` in the Jacobian ``d(A(U)U)/dU = A(U) + C(U)``.

    ``c[i, i+1] = 2 g'_i (U[i+1]-U[i])**2 / h**4`` and each diagonal entry
    is minus the sum of its row's off-diagonals. Only used for diagnostics.
    """
    line = np.asarray(line, dtype=np.float64)
    d2 = np.diff(line, axis=-1) ** 2
    off = 2.0 * np.asarray(spec.dg(d2 / (h * h))) * d2 / h ** 4
    diag = np.zeros(line.shape)
    diag[..., :-1] -= off
    diag[..., 1:] -= off
    return TridiagonalSystem(off.copy(), diag, off.copy(), 0.0)


def gradient_magnitude(v: ImageVolume) -> np.ndarray:
    """Euclidean norm of the central-difference gradient, one-sided at the borders.

    Axes of length one contribute nothing.
    """
    total = np.zeros(v.dims)
    for axis, h in enumerate(v.spacing):
        if v.dims[axis] < 2:
            continue
        total += np.gradient(v.data, h, axis=axis, edge_order=1) ** 2
    return np.sqrt(total)
