"""Quantization error and convergence expressions for the four schemes.

Errors are in the same units as the mean squared gradient error summed over
``d`` coordinates and averaged over ``N`` clients; ``normalized`` variants
divide by ``d * gamma**2 / N``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, InvalidDensityError, InvalidParameterError
from .laplace import SQRT6, LaplaceModel, optimal_alpha_tnq, optimal_alpha_tuq, solve_v
from .quantizer import DensityFunction, Scheme, quad


@dataclass(frozen=True)
class ErrorBreakdown:
    variance_term: float
    bias_term: float
    total: float = field(init=False)

    def __post_init__(self):
        if self.variance_term < 0 or self.bias_term < 0:
            raise ValueError("error terms must be nonnegative")
        object.__setattr__(self, "total", self.variance_term + self.bias_term)


@dataclass(frozen=True)
class ConvergenceParams:
    clients: int
    batch: int
    dim: int
    grad_variance: float
    smoothness: float
    lr: float
    rounds: int
    init_gap: float

    def __post_init__(self):
        for name in ("clients", "batch", "dim", "rounds"):
            if getattr(self, name) < 1:
                raise InvalidParameterError(f"{name} must be >= 1")
        if self.grad_variance < 0 or self.init_gap < 0:
            raise InvalidParameterError("variance and initial gap must be nonnegative")
        if not self.smoothness > 0 or not self.lr > 0:
            raise InvalidParameterError("smoothness and learning rate must be positive")


@dataclass(frozen=True)
class SchemeError:
    scheme: Scheme
    s: int
    gamma: float
    d: int
    N: int
    alpha: float
    breakdown: ErrorBreakdown

    @property
    def value(self) -> float:
        return self.breakdown.total

    @property
    def normalized(self) -> float:
        return self.value / (self.d * self.gamma**2 / self.N)


@dataclass(frozen=True)
class ArgminResult:
    alpha: float
    error: float
    warning: bool = False


def _scale(d, N):
    return d / N


def error_tnq_general(pdf, density: DensityFunction, alpha: float, s: int, d: int = 1, N: int = 1, tail=None):
    """Variance plus truncation-bias error for an arbitrary symmetric pdf.

    ``tail(alpha)``, when given, must return ``int_alpha^inf (g - alpha)^2 pdf``
    analytically; otherwise it is integrated numerically.
    """
    c = _scale(d, N)
    var = quad(lambda g: pdf(g) / density(g) ** 2, -alpha, alpha, points=[0.0] if alpha > 0 else None)
    if tail is not None:
        t = tail(alpha)
    else:
        t = quad(lambda g: (g - alpha) ** 2 * pdf(g), alpha, np.inf)
    return ErrorBreakdown(c * var / 4.0, 2.0 * c * t)


def laplace_tail(model: LaplaceModel):
    """Analytic ``int_alpha^inf (g - alpha)^2 p(g) dg`` for a Laplace pdf."""
    return lambda alpha: model.scale**2 * math.exp(-alpha / model.scale)


def optimal_density_general(pdf, alpha: float, s: int) -> DensityFunction:
    """Point density proportional to ``pdf**(1/3)``, normalized to ``s`` on ``[-alpha, alpha]``."""
    probe = np.linspace(-alpha, alpha, 1025)
    vals = np.array([pdf(x) for x in probe])
    if np.any(~np.isfinite(vals)) or np.any(vals <= 0):
        raise InvalidDensityError("pdf must be positive on the quantization range")
    mass = quad(lambda g: pdf(g) ** (1.0 / 3.0), -alpha, alpha, points=[0.0])
    coef = s / mass

    def func(g):
        g = np.asarray(g, dtype=float)
        out = coef * np.cbrt(np.vectorize(pdf, otypes=[float])(g)) if g.ndim else coef * np.cbrt(pdf(float(g)))
        return out

    return DensityFunction(func=func, alpha=float(alpha), budget=s)


def error_tnq_laplace_breakdown(alpha, s, gamma, d=1, N=1) -> ErrorBreakdown:
    c = _scale(d, N)
    g2 = gamma**2
    var = 27.0 * c * g2 / s**2 * (-math.expm1(-alpha / (3.0 * gamma))) ** 3
    bias = 2.0 * c * g2 * math.exp(-alpha / gamma)
    return ErrorBreakdown(var, bias)


def error_tnq_laplace(alpha, s, gamma, d=1, N=1) -> float:
    if not (gamma > 0 and alpha >= 0):
        raise InvalidParameterError("need gamma > 0 and alpha >= 0")
    return error_tnq_laplace_breakdown(alpha, s, gamma, d, N).total


def theorem1_bound(s, gamma, d=1, N=1) -> float:
    if s < 1:
        raise InvalidParameterError("s must be >= 1")
    return 27.0 * d * gamma**2 / (N * (s + 1.5 * SQRT6) ** 2)


def error_nq(s, gamma, d=1, N=1) -> float:
    return 27.0 * d * gamma**2 / (N * s**2)


def error_tuq(alpha, s, gamma, d=1, N=1) -> ErrorBreakdown:
    if not (gamma > 0 and alpha >= 0):
        raise InvalidParameterError("need gamma > 0 and alpha >= 0")
    c = _scale(d, N)
    return ErrorBreakdown(c * alpha**2 / s**2, 2.0 * c * gamma**2 * math.exp(-alpha / gamma))


def error_tuq_optimal(s, gamma, d=1, N=1) -> float:
    # substituting alpha = v*gamma with exp(-v) = v / s^2
    v = solve_v(s).value
    return d * gamma**2 * (v * v + 2.0 * v) / (N * s**2)


def error_uq(s, gamma, d=1, N=1) -> float:
    if d < 1:
        raise InvalidParameterError("d must be >= 1")
    return 4.0 * d * gamma**2 * math.log(2 * d) ** 2 / (N * s**2)


def linf_bound(gamma, d) -> float:
    """Upper bound on E[max_j g_j^2] for d i.i.d. Laplace coordinates."""
    return 4.0 * gamma**2 * math.log(2 * d) ** 2


def linf_range(gamma, d) -> float:
    """Range used for the untruncated schemes: square root of :func:`linf_bound`."""
    return 2.0 * gamma * math.log(2 * d)


def convergence_bound(p: ConvergenceParams, quant_error: float) -> float:
    if p.lr > 1.0 / p.smoothness:
        raise ContractViolation(f"learning rate {p.lr} exceeds 1/smoothness = {1.0 / p.smoothness}")
    return 2.0 * p.init_gap / (p.rounds * p.lr) + p.grad_variance / (p.clients * p.batch) + quant_error


def error_tnq_reduced(pdf, alpha, s, d=1, N=1) -> float:
    """Error with the density already optimized for this ``alpha``:
    ``(d / 4Ns^2) (int p^(1/3))^3 + bias``."""
    c = _scale(d, N)
    mass = quad(lambda g: pdf(g) ** (1.0 / 3.0), -alpha, alpha, points=[0.0])
    tail = quad(lambda g: (g - alpha) ** 2 * pdf(g), alpha, np.inf)
    return c * mass**3 / (4.0 * s**2) + 2.0 * c * tail


_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_section(f, a, b, tol=1e-6, max_iter=500):
    """Minimize a unimodal ``f`` on ``[a, b]``; returns ``(x, f(x))``."""
    c = b - _INVPHI * (b - a)
    e = a + _INVPHI * (b - a)
    fc, fe = f(c), f(e)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fe:
            b, e, fe = e, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, e, fe
            e = a + _INVPHI * (b - a)
            fe = f(e)
    x = 0.5 * (a + b)
    return x, f(x)


def argmin_alpha_numeric(pdf, s, interval, d=1, N=1, tol=1e-6, scan=48) -> ArgminResult:
    """Threshold minimizing the error when the density is re-optimized per threshold.

    A coarse scan first brackets the best region; more than one local minimum
    on the scan, or a minimum at the interval edge, sets ``warning``.
    """
    lo, hi = map(float, interval)
    if not 0 < lo < hi:
        raise InvalidParameterError("search interval must satisfy 0 < lo < hi")
    f = lambda a: error_tnq_reduced(pdf, a, s, d, N)
    xs = np.linspace(lo, hi, scan)
    fs = np.array([f(x) for x in xs])
    interior_minima = [i for i in range(1, scan - 1) if fs[i] <= fs[i - 1] and fs[i] <= fs[i + 1]]
    best = int(np.argmin(fs))
    warn = len(interior_minima) != 1 or best in (0, scan - 1)
    a = xs[max(best - 1, 0)]
    b = xs[min(best + 1, scan - 1)]
    x, fx = golden_section(f, a, b, tol=tol)
    if fs[best] < fx:
        x, fx = float(xs[best]), float(fs[best])
    if warn:
        warnings.warn("error curve is not unimodal on the interval; returning best point found", RuntimeWarning)
    return ArgminResult(float(x), float(fx), warn)


def scheme_error(scheme, s, gamma, d=1, N=1) -> SchemeError:
    """Error at each scheme's own optimal (or implied) threshold under the Laplace model."""
    scheme = Scheme.parse(scheme)
    model = LaplaceModel(gamma)
    if scheme is Scheme.TNQ:
        alpha = optimal_alpha_tnq(s, model)
        br = error_tnq_laplace_breakdown(alpha, s, gamma, d, N)
    elif scheme is Scheme.TUQ:
        alpha = optimal_alpha_tuq(s, model)
        br = error_tuq(alpha, s, gamma, d, N)
    elif scheme is Scheme.NQ:
        alpha = linf_range(gamma, d)
        br = ErrorBreakdown(error_nq(s, gamma, d, N), 0.0)
    else:
        alpha = linf_range(gamma, d)
        br = ErrorBreakdown(error_uq(s, gamma, d, N), 0.0)
    return SchemeError(scheme, s, gamma, d, N, alpha, br)


def scheme_table(gamma, d, N, bits_list):
    rows = []
    for scheme in Scheme:
        for b in bits_list:
            rows.append(scheme_error(scheme, (1 << b) - 1, gamma, d, N))
    return rows
