"""Diffusivity functions of the squared gradient magnitude ``r = s**2``.

Every diffusivity is a small frozen dataclass with vectorized ``g`` and
``dg`` methods. The module-level functions :func:`g`, :func:`dg`,
:func:`enhancement_indicator` and :func:`lipschitz_bound` dispatch on the
dataclass and are what the rest of the package calls.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "Proposed",
    "PeronaMalik",
    "RegularizedPower",
    "BoundedStep",
    "Linear",
    "Diffusivity",
    "g",
    "dg",
    "enhancement_indicator",
    "lipschitz_bound",
    "from_name",
]


def _check_r(r):
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0) or np.any(np.isnan(r)):
        raise ValueError("diffusivity argument r must be nonnegative")
    return r


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def _positive(name, value):
    if value is None or not (value > 0 and math.isfinite(value)):
        raise ValueError(f"{name} must be positive and finite, got {value}")


@dataclass(frozen=True)
class Proposed:
    """Linear below the threshold ``gamma``, power decay ``(gamma/r)**(p/2)`` above it."""

    gamma: float
    p: float

    def __post_init__(self):
        _positive("gamma", self.gamma)
        if self.p is None or not (self.p > 1 and math.isfinite(self.p)):
            raise ValueError(f"p must be finite and > 1, got {self.p}")

    def g(self, r):
        r = _check_r(r)
        val = np.where(r < self.gamma, 1.0, (self.gamma / np.maximum(r, self.gamma)) ** (0.5 * self.p))
        return _out(val)

    def dg(self, r):
        # right-hand limit at r == gamma
        r = _check_r(r)
        rr = np.maximum(r, self.gamma)
        val = np.where(r < self.gamma, 0.0,
                       -0.5 * self.p * self.gamma ** (0.5 * self.p) / rr ** (0.5 * self.p + 1))
        return _out(val)

    def lipschitz(self) -> float:
        return self.p / (2.0 * self.gamma)


@dataclass(frozen=True)
class PeronaMalik:
    """``exp(-r / (2 tau**2))``."""

    tau: float

    def __post_init__(self):
        _positive("tau", self.tau)

    def g(self, r):
        r = _check_r(r)
        return _out(np.exp(-r / (2.0 * self.tau ** 2)))

    def dg(self, r):
        r = _check_r(r)
        c = 1.0 / (2.0 * self.tau ** 2)
        return _out(-c * np.exp(-c * r))


@dataclass(frozen=True)
class RegularizedPower:
    """``(r + eps**2) ** (-p/2)``.

    Warning: for small ``eps`` the values near ``r = 0`` are huge
    (``eps**-p``), which makes large time steps unreliable. Use it for
    comparison runs only.
    """

    eps: float
    p: float

    def __post_init__(self):
        _positive("eps", self.eps)
        if self.p is None or not (self.p > 1 and math.isfinite(self.p)):
            raise ValueError(f"p must be finite and > 1, got {self.p}")

    def g(self, r):
        r = _check_r(r)
        return _out((r + self.eps ** 2) ** (-0.5 * self.p))

    def dg(self, r):
        r = _check_r(r)
        return _out(-0.5 * self.p * (r + self.eps ** 2) ** (-0.5 * self.p - 1))


@dataclass(frozen=True)
class BoundedStep:
    """Reference curve: 1 for slopes below ``mu0``, 0 above. Not differentiable, not for solving."""

    mu0: float

    def __post_init__(self):
        _positive("mu0", self.mu0)

    def g(self, r):
        r = _check_r(r)
        return _out(np.where(r < self.mu0 ** 2, 1.0, 0.0))

    def dg(self, r):
        raise NotImplementedError("the bounded step function has no derivative")


@dataclass(frozen=True)
class Linear:
    def g(self, r):
        r = _check_r(r)
        return _out(np.ones_like(r))

    def dg(self, r):
        r = _check_r(r)
        return _out(np.zeros_like(r))


Diffusivity = Union[Proposed, PeronaMalik, RegularizedPower, BoundedStep, Linear]


def g(spec: Diffusivity, r):
    """Diffusivity value at squared slope ``r`` (scalar or array)."""
    return spec.g(r)


def dg(spec: Diffusivity, r):
    """Derivative of ``g`` with respect to ``r``."""
    return spec.dg(r)


def enhancement_indicator(spec: Diffusivity, r):
    """``g(r) + 2 r g'(r)``; negative values mark edge-enhancing slopes.

    This is the second derivative of the potential ``rho(s)`` at ``s = sqrt(r)``.
    """
    r = _check_r(r)
    return _out(np.asarray(spec.g(r)) + 2.0 * np.asarray(spec.dg(r)) * r)


def lipschitz_bound(spec: Diffusivity) -> float:
    if not isinstance(spec, Proposed):
        raise NotImplementedError(f"no Lipschitz bound implemented for {type(spec).__name__}")
    return spec.lipschitz()


def from_name(name: str, *, gamma=None, p=None, tau=None, eps=None) -> Diffusivity:
    """Build a diffusivity from its config name (``proposed``, ``perona-malik``, ...)."""
    key = name.strip().lower().replace("_", "-")
    if key == "proposed":
        return Proposed(gamma, p)
    if key in ("perona-malik", "peronamalik", "pm"):
        return PeronaMalik(tau)
    if key in ("regularized", "regularized-power"):
        return RegularizedPower(eps, p)
    if key == "linear":
        return Linear()
    if key in ("bounded-step", "step"):
        raise ValueError("the bounded step function is a reference curve and cannot drive the filter")
    raise ValueError(f"unknown diffusivity {name!r}")
