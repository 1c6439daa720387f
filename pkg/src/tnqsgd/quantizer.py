"""Two-stage gradient compression: truncation followed by stochastic
rounding onto a (possibly non-uniform) grid of quantization points.

The grid is described by a point density ``lambda(g)`` (reciprocal of the
local interval width) that integrates to the level count ``s`` over
``[-alpha, alpha]``.  Point ``l_k`` sits where the cumulative density
reaches ``k``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, optimize

from .errors import (
    InvalidDensityError,
    InvalidInputError,
    InvalidParameterError,
    NormalizationError,
    NumericalError,
    QuantRangeError,
)

QUAD_EPSABS = 1e-10
NORMALIZATION_RTOL = 1e-6
GRID_CUMULATIVE_TOL = 1e-8


class Scheme(enum.IntEnum):
    """Compression scheme; the integer value is the wire tag."""

    TNQ = 0  # truncated non-uniform
    TUQ = 1  # truncated uniform
    NQ = 2  # non-uniform, range = max magnitude
    UQ = 3  # uniform, range = max magnitude

    @property
    def truncating(self) -> bool:
        return self in (Scheme.TNQ, Scheme.TUQ)

    @property
    def nonuniform(self) -> bool:
        return self in (Scheme.TNQ, Scheme.NQ)

    @classmethod
    def parse(cls, name) -> "Scheme":
        if isinstance(name, Scheme):
            return name
        try:
            return cls[str(name).upper()]
        except KeyError:
            raise InvalidParameterError(f"unknown scheme {name!r}") from None


def levels_for_bits(bits: int) -> int:
    return (1 << bits) - 1


@dataclass(frozen=True)
class QuantConfig:
    scheme: Scheme
    bits: int
    threshold: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme.parse(self.scheme))
        if int(self.bits) != self.bits or self.bits < 1 or self.bits > 32:
            raise InvalidParameterError(f"bits must be an integer in [1, 32], got {self.bits}")
        if not np.isfinite(self.threshold) or self.threshold < 0:
            raise InvalidParameterError(f"threshold must be finite and >= 0, got {self.threshold}")
        if self.scheme.truncating and self.threshold <= 0:
            raise InvalidParameterError("truncating schemes need a positive threshold")

    @property
    def levels(self) -> int:
        return levels_for_bits(self.bits)


@dataclass(frozen=True)
class DensityFunction:
    """Quantization-point density on ``[-alpha, alpha]`` with budget ``s``.

    ``func`` must accept numpy arrays.  ``cumulative`` is optional; when
    given it returns ``int_{-alpha}^x func`` (vectorized) and lets
    :func:`build_grid` skip nested quadrature.
    """

    func: Callable[[np.ndarray], np.ndarray]
    alpha: float
    budget: float
    cumulative: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __call__(self, g):
        return self.func(np.asarray(g, dtype=float))

    def integral(self, lo=None, hi=None) -> float:
        lo = -self.alpha if lo is None else lo
        hi = self.alpha if hi is None else hi
        if self.cumulative is not None:
            return float(self.cumulative(np.float64(hi)) - self.cumulative(np.float64(lo)))
        return quad(lambda x: float(self.func(np.float64(x))), lo, hi)


def quad(f, a, b, points=None) -> float:
    """Adaptive quadrature at the package's absolute tolerance."""
    value, err, *rest = integrate.quad(
        f, a, b, epsabs=QUAD_EPSABS, epsrel=1e-12, limit=500, points=points, full_output=1
    )
    # a message is only appended when quad flags a problem; tolerate it if the error estimate is still small
    if len(rest) > 1 and err > 1e-8 * max(1.0, abs(value)):
        raise NumericalError(
            "quadrature did not converge", interval=(a, b), estimate=value, abserr=err, message=rest[1]
        )
    return float(value)


def uniform_density(alpha: float, s: int) -> DensityFunction:
    if alpha <= 0:
        raise InvalidParameterError("alpha must be positive")
    c = s / (2.0 * alpha)
    return DensityFunction(
        func=lambda g: np.full(np.shape(g), c),
        alpha=alpha,
        budget=s,
        cumulative=lambda x: (np.asarray(x) + alpha) * c,
    )


@dataclass(frozen=True)
class QuantizationGrid:
    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 1 or pts.size < 2:
            raise InvalidParameterError("a grid needs at least two points")
        if not np.all(np.isfinite(pts)) or not np.all(np.diff(pts) > 0):
            raise InvalidParameterError("grid points must be finite and strictly increasing")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def levels(self) -> int:
        return self.points.size - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.points)

    @property
    def lo(self) -> float:
        return float(self.points[0])

    @property
    def hi(self) -> float:
        return float(self.points[-1])

    def __repr__(self):
        return f"QuantizationGrid(s={self.levels}, range=[{self.lo:.6g}, {self.hi:.6g}])"


def truncate(g, alpha: float) -> np.ndarray:
    """Clip every coordinate of ``g`` to ``[-alpha, alpha]``."""
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise InvalidInputError("gradient contains non-finite values")
    if not alpha > 0 or not np.isfinite(alpha):
        raise InvalidParameterError(f"truncation threshold must be positive, got {alpha}")
    return np.clip(g, -alpha, alpha)


def _check_density(density: DensityFunction, alpha: float, s: int):
    probe = np.linspace(-alpha, alpha, 2049)[1:-1]
    values = density(probe)
    if not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise InvalidDensityError("density must be positive and finite on the open interval")
    total = density.integral(-alpha, alpha)
    if abs(total - s) > NORMALIZATION_RTOL * s:
        raise NormalizationError(f"density integrates to {total!r}, expected {s}")


def _newton_bisect(density, targets, alpha, tol=1e-12):
    """Solve ``cumulative(x) = k`` for all targets at once.

    Newton steps use the density as derivative; a step leaving the current
    bracket is replaced by the bracket midpoint.
    """
    cumulative = density.cumulative
    lo = np.full(targets.shape, -alpha)
    hi = np.full(targets.shape, alpha)
    x = -alpha + 2.0 * alpha * targets / density.budget
    for _ in range(200):
        f = cumulative(x) - targets
        if np.all(np.abs(f) <= tol * max(1.0, density.budget)):
            return x
        lo = np.where(f < 0, x, lo)
        hi = np.where(f > 0, x, hi)
        step = x - f / density(x)
        inside = (step > lo) & (step < hi)
        x = np.where(f == 0, x, np.where(inside, step, 0.5 * (lo + hi)))
        if np.all(hi - lo <= 4 * np.spacing(np.maximum(np.abs(lo), np.abs(hi)))):
            break
    return x


def build_grid(density: DensityFunction, alpha: float, s: int) -> QuantizationGrid:
    """Place ``s + 1`` points so the cumulative density at ``l_k`` equals ``k``."""
    if int(s) != s or s < 1:
        raise InvalidParameterError(f"level count must be a positive integer, got {s}")
    if not alpha > 0:
        raise InvalidParameterError("alpha must be positive")
    _check_density(density, alpha, s)
    targets = np.arange(1, s, dtype=np.float64)
    if s == 1:
        inner = np.empty(0)
    elif density.cumulative is not None:
        inner = _newton_bisect(density, targets, alpha)
    else:
        inner = np.empty(s - 1)
        left = -alpha
        for j, k in enumerate(targets):
            # cumulative from the previous point keeps each quadrature short
            base = k - 1.0
            fn = lambda x, a=left, base=base: base + density.integral(a, x) - k
            inner[j] = optimize.brentq(fn, left, alpha, xtol=1e-14, rtol=4 * np.finfo(float).eps)
            left = inner[j]
    points = np.concatenate(([-alpha], inner, [alpha]))
    if s > 1:
        if density.cumulative is not None:
            achieved = density.cumulative(inner)
        else:
            achieved = np.cumsum([density.integral(a, b) for a, b in zip(points[:-2], points[1:-1])])
        worst = float(np.max(np.abs(achieved - targets)))
        if worst > GRID_CUMULATIVE_TOL:
            raise NumericalError("grid root-finding missed its targets", max_residual=worst)
    return QuantizationGrid(points)


def uniform_grid(alpha: float, s: int) -> QuantizationGrid:
    return build_grid(uniform_density(alpha, s), alpha, s)


def stochastic_quantize(x, grid: QuantizationGrid, rng: np.random.Generator):
    """Randomly round ``x`` to an adjacent grid point, unbiased in expectation.

    Returns level indices (same shape as ``x``; a Python int for scalar input).
    A value equal to an interior grid point is treated as the left end of its
    interval and therefore always maps to that point.
    """
    scalar = np.ndim(x) == 0
    x = np.asarray(x, dtype=np.float64)
    pts = grid.points
    if x.size and (np.any(~(x >= pts[0])) or np.any(~(x <= pts[-1]))):
        raise QuantRangeError(f"values outside grid range [{pts[0]}, {pts[-1]}]; truncate first")
    left = np.clip(np.searchsorted(pts, x, side="right") - 1, 0, grid.levels - 1)
    width = pts[left + 1] - pts[left]
    p_up = (x - pts[left]) / width
    up = rng.random(x.shape) < p_up
    idx = left + up
    if scalar:
        return int(idx)
    return idx.astype(np.int64)


def dequantize(k, grid: QuantizationGrid):
    k_arr = np.asarray(k)
    if k_arr.size and (np.any(k_arr < 0) or np.any(k_arr > grid.levels)):
        raise QuantRangeError(f"level index outside [0, {grid.levels}]")
    if k_arr.ndim == 0:
        return float(grid.points[int(k_arr)])
    return grid.points[k_arr]


def variance_bound(grid: QuantizationGrid, pdf, check_normalized: bool = True) -> float:
    """Upper bound sum_k P_k |Delta_k|^2 / 4 on the rounding MSE under ``pdf``."""
    pts = grid.points
    if check_normalized:
        total = (
            quad(pdf, -np.inf, pts[0])
            + sum(quad(pdf, a, b) for a, b in zip(pts[:-1], pts[1:]))
            + quad(pdf, pts[-1], np.inf)
        )
        if abs(total - 1.0) > 1e-6:
            raise InvalidDensityError(f"pdf integrates to {total!r}, expected 1")
    masses = np.array([quad(pdf, a, b) for a, b in zip(pts[:-1], pts[1:])])
    return float(np.sum(masses * grid.widths**2) / 4.0)


def expected_rounding_mse(grid: QuantizationGrid, pdf) -> float:
    """Exact MSE of stochastic rounding for values drawn from ``pdf`` on the grid range."""
    pts = grid.points
    return float(
        sum(quad(lambda x, a=a, b=b: (b - x) * (x - a) * pdf(x), a, b) for a, b in zip(pts[:-1], pts[1:]))
    )
