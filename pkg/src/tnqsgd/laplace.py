"""Laplace gradient model and its closed-form quantizer parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateModelError, InvalidInputError, InvalidParameterError, NumericalError
from .quantizer import DensityFunction, QuantizationGrid, build_grid

SQRT6 = math.sqrt(6.0)


@dataclass(frozen=True)
class LaplaceModel:
    scale: float

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise InvalidParameterError(f"Laplace scale must be positive, got {self.scale}")

    def pdf(self, g):
        return laplace_pdf(g, self)

    def cdf(self, g):
        g = np.asarray(g, dtype=float)
        z = np.exp(-np.abs(g) / self.scale)
        return np.where(g < 0, 0.5 * z, 1.0 - 0.5 * z)

    def sample(self, rng, d):
        return laplace_sample(self, rng, d)


@dataclass(frozen=True)
class RootSolution:
    value: float
    residual: float
    iterations: int = 0


def estimate_gamma(g) -> LaplaceModel:
    """Maximum-likelihood scale: the mean absolute coordinate."""
    g = np.asarray(g, dtype=float).ravel()
    if g.size == 0:
        raise InvalidInputError("cannot estimate a scale from an empty vector")
    if not np.all(np.isfinite(g)):
        raise InvalidInputError("gradient contains non-finite values")
    gamma = float(np.mean(np.abs(g)))
    if gamma == 0.0:
        raise DegenerateModelError("all-zero gradient has no Laplace scale")
    return LaplaceModel(gamma)


def laplace_pdf(g, model: LaplaceModel):
    g = np.asarray(g, dtype=float)
    out = np.exp(-np.abs(g) / model.scale) / (2.0 * model.scale)
    return float(out) if out.ndim == 0 else out


def laplace_sample(model: LaplaceModel, rng, d: int) -> np.ndarray:
    u = rng.random(d)
    u[u == 0.0] = np.nextafter(0.0, 1.0)  # inverse CDF is infinite at 0
    lower = u < 0.5
    left = np.log(2.0 * np.where(lower, u, 0.5))
    right = -np.log(2.0 * (1.0 - np.where(lower, 0.5, u)))
    return model.scale * np.where(lower, left, right)


def optimal_alpha_tnq(s: int, model: LaplaceModel) -> float:
    if s < 1:
        raise InvalidParameterError("s must be >= 1")
    return 3.0 * math.log1p(SQRT6 * s / 9.0) * model.scale


def optimal_density_tnq(s: int, model: LaplaceModel, alpha: float | None = None) -> DensityFunction:
    """Cube-root-of-Laplace point density normalized to ``s`` on ``[-alpha, alpha]``.

    With the default (optimal) threshold the coefficient reduces to
    ``(3*sqrt(6) + 2s) / (12 gamma)``.
    """
    if alpha is None:
        alpha = optimal_alpha_tnq(s, model)
    if not alpha > 0:
        raise InvalidParameterError("alpha must be positive")
    g3 = 3.0 * model.scale
    half_mass = g3 * -math.expm1(-alpha / g3)  # int_0^alpha exp(-g/3gamma)
    coef = s / (2.0 * half_mass)

    def func(g):
        return coef * np.exp(-np.abs(g) / g3)

    def cumulative(x):
        x = np.asarray(x, dtype=float)
        part = coef * g3 * -np.expm1(-np.abs(x) / g3)
        return 0.5 * s + np.sign(x) * part

    return DensityFunction(func=func, alpha=float(alpha), budget=s, cumulative=cumulative)


def optimal_grid_tnq(s: int, model: LaplaceModel, alpha: float | None = None) -> QuantizationGrid:
    if alpha is None:
        alpha = optimal_alpha_tnq(s, model)
    return build_grid(optimal_density_tnq(s, model, alpha), alpha, s)


def solve_v(s: int, max_iter: int = 100) -> RootSolution:
    """Root of ``v * exp(v) = s**2`` by safeguarded Newton iteration."""
    if s < 1:
        raise InvalidParameterError("s must be >= 1")
    target = float(s) ** 2
    log_t = math.log(target)
    lo, hi = 0.0, 2.0 * log_t + 2.0
    v = log_t - math.log(log_t + 1.0) + 1.0
    tol = 1e-10 * target
    for it in range(1, max_iter + 1):
        ev = math.exp(v)
        f = v * ev - target
        if abs(f) < tol:
            return RootSolution(v, abs(f), it)
        if f > 0:
            hi = min(hi, v)
        else:
            lo = max(lo, v)
        step = v - f / (ev * (1.0 + v))
        v = step if lo < step < hi else 0.5 * (lo + hi)
    f = v * math.exp(v) - target
    if abs(f) < tol:
        return RootSolution(v, abs(f), max_iter)
    raise NumericalError("v*exp(v) = s^2 did not converge", s=s, v=v, residual=f, bracket=(lo, hi))


def optimal_alpha_tuq(s: int, model: LaplaceModel) -> float:
    return solve_v(s).value * model.scale
