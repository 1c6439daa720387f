import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, optimize, special, stats

from tnqsgd import analysis
from tnqsgd.errors import DegenerateModelError, InvalidInputError, InvalidParameterError
from tnqsgd.laplace import (
    LaplaceModel,
    estimate_gamma,
    laplace_pdf,
    laplace_sample,
    optimal_alpha_tnq,
    optimal_alpha_tuq,
    optimal_density_tnq,
    solve_v,
)

LAPLACE1 = LaplaceModel(1.0)


class TestModel:
    @pytest.mark.parametrize("scale", [0.0, -1.0, float("inf"), float("nan")])
    def test_rejects_bad_scale(self, scale):
        with pytest.raises(InvalidParameterError):
            LaplaceModel(scale)

    def test_pdf_values(self):
        assert laplace_pdf(0.0, LAPLACE1) == 0.5
        g = LaplaceModel(2.0)
        assert laplace_pdf(2.0, g) == pytest.approx(math.exp(-1) / 4.0, rel=1e-15)

    def test_pdf_integrates_to_one(self):
        m = LaplaceModel(0.7)
        assert integrate.quad(m.pdf, -np.inf, np.inf)[0] == pytest.approx(1.0, abs=1e-10)

    def test_cdf_matches_scipy(self):
        x = np.linspace(-5, 5, 41)
        np.testing.assert_allclose(LaplaceModel(1.3).cdf(x), stats.laplace(scale=1.3).cdf(x), atol=1e-15)


class TestEstimateGamma:
    def test_examples(self):
        assert estimate_gamma([1, -1, 1, -1]).scale == 1.0
        assert estimate_gamma([0, 2]).scale == 1.0

    def test_mle_consistency(self):
        g = laplace_sample(LaplaceModel(0.5), np.random.default_rng(0), 10**6)
        assert estimate_gamma(g).scale == pytest.approx(0.5, abs=0.002)

    def test_all_zero(self):
        with pytest.raises(DegenerateModelError):
            estimate_gamma(np.zeros(5))

    @pytest.mark.parametrize("bad", [[], [1.0, np.inf], [np.nan]])
    def test_invalid_input(self, bad):
        with pytest.raises(InvalidInputError):
            estimate_gamma(bad)


class TestSampling:
    def test_moments(self):
        g = LAPLACE1.sample(np.random.default_rng(1), 10**6)
        assert abs(g.mean()) < 0.01
        assert np.abs(g).mean() == pytest.approx(1.0, rel=0.01)

    def test_kolmogorov_smirnov(self):
        g = LaplaceModel(2.0).sample(np.random.default_rng(2), 10**5)
        result = stats.kstest(g, LaplaceModel(2.0).cdf)
        # 1% critical value of the one-sample KS statistic
        assert result.statistic < 1.628 / math.sqrt(g.size)

    def test_finite_even_at_extreme_uniforms(self):
        class Edge:
            def random(self, n):
                return np.array([0.0, 0.5, 1.0 - 2**-53][:n])

        out = laplace_sample(LAPLACE1, Edge(), 3)
        assert np.all(np.isfinite(out))
        assert out[1] == 0.0

    def test_same_stream_same_samples(self):
        a = LAPLACE1.sample(np.random.default_rng(9), 50)
        b = LAPLACE1.sample(np.random.default_rng(9), 50)
        np.testing.assert_array_equal(a, b)


class TestOptimalAlphaTnq:
    @pytest.mark.parametrize("s,expected", [(3, 1.79), (7, 3.20), (15, 4.88)])
    def test_constants(self, s, expected):
        assert optimal_alpha_tnq(s, LAPLACE1) == pytest.approx(expected, abs=0.005)

    def test_scale(self):
        assert optimal_alpha_tnq(3, LaplaceModel(2.0)) == pytest.approx(3.58, abs=0.005)

    @given(st.integers(1, 5000), st.floats(1e-3, 1e3))
    def test_linear_in_gamma(self, s, c):
        assert optimal_alpha_tnq(s, LaplaceModel(c)) == pytest.approx(c * optimal_alpha_tnq(s, LAPLACE1), rel=1e-14)

    def test_matches_numeric_argmin(self):
        for s in range(1, 1024):
            f = lambda a: analysis.error_tnq_laplace(a, s, 1.0)
            x, _ = analysis.golden_section(f, 1e-6, 40.0, tol=1e-9)
            assert x == pytest.approx(optimal_alpha_tnq(s, LAPLACE1), rel=1e-4), s


class TestOptimalDensityTnq:
    @pytest.mark.parametrize("s", [3, 7, 15, 255])
    def test_budget_by_quadrature(self, s):
        density = optimal_density_tnq(s, LAPLACE1)
        alpha = optimal_alpha_tnq(s, LAPLACE1)
        total = integrate.quad(lambda g: float(density(g)), -alpha, alpha, epsabs=1e-12, epsrel=1e-13)[0]
        assert total == pytest.approx(s, abs=1e-6)

    def test_closed_form_coefficient(self):
        s = 3
        density = optimal_density_tnq(s, LAPLACE1)
        c = (3 * math.sqrt(6) + 2 * s) / 12.0
        assert float(density(0.0)) == pytest.approx(c, rel=1e-12)
        assert c == pytest.approx(1.1124, abs=1e-4)

    def test_printed_eight_gamma_coefficient_overspends_budget(self):
        # the alternative coefficient with an 8 gamma denominator integrates to 3s/2
        s = 7
        alpha = optimal_alpha_tnq(s, LAPLACE1)
        c8 = (3 * math.sqrt(6) + 2 * s) / 8.0
        total = integrate.quad(lambda g: c8 * math.exp(-abs(g) / 3.0), -alpha, alpha)[0]
        assert total == pytest.approx(1.5 * s, rel=1e-9)

    @pytest.mark.parametrize("s", [1, 3, 7, 15, 63])
    def test_end_to_center_ratio(self, s):
        density = optimal_density_tnq(s, LAPLACE1)
        alpha = optimal_alpha_tnq(s, LAPLACE1)
        ratio = float(density(0.0)) / float(density(alpha))
        assert ratio == pytest.approx(1 + math.sqrt(6) * s / 9, rel=1e-12)

    def test_custom_alpha_still_normalized(self):
        density = optimal_density_tnq(7, LaplaceModel(0.3), alpha=0.5)
        assert density.integral() == pytest.approx(7.0, rel=1e-12)


class TestSolveV:
    @pytest.mark.parametrize("s,expected", [(3, 1.68), (7, 2.85), (15, 4.02)])
    def test_constants(self, s, expected):
        assert solve_v(s).value == pytest.approx(expected, abs=0.005)

    def test_omega_constant(self):
        v = solve_v(1).value
        oracle = optimize.bisect(lambda x: x * math.exp(x) - 1.0, 0.0, 1.0, xtol=1e-15)
        assert v == pytest.approx(oracle, abs=1e-9)
        assert v == pytest.approx(0.567143, abs=1e-6)

    def test_matches_lambert_w(self):
        for s in [1, 2, 5, 31, 255, 4095, 2**16]:
            assert solve_v(s).value == pytest.approx(special.lambertw(float(s) ** 2).real, rel=1e-10)

    def test_residual_and_monotone_up_to_2_16(self):
        previous = -1.0
        for s in list(range(1, 2049)) + [2**k - 1 for k in range(12, 17)] + [2**16]:
            sol = solve_v(s)
            assert sol.residual < 1e-10 * s * s
            assert abs(sol.value * math.exp(sol.value) - s * s) < 1e-10 * s * s
            assert sol.value > previous
            previous = sol.value

    def test_rejects_zero(self):
        with pytest.raises(InvalidParameterError):
            solve_v(0)


class TestOptimalAlphaTuq:
    def test_constants(self):
        assert optimal_alpha_tuq(3, LAPLACE1) == pytest.approx(1.68, abs=0.005)
        assert optimal_alpha_tuq(15, LaplaceModel(0.5)) == pytest.approx(2.01, abs=0.005)

    @pytest.mark.parametrize("s", [1, 3, 7, 15, 255])
    def test_is_argmin_of_error(self, s):
        f = lambda a: analysis.error_tuq(a, s, 1.0).total
        x, _ = analysis.golden_section(f, 1e-6, 30.0, tol=1e-9)
        assert x == pytest.approx(optimal_alpha_tuq(s, LAPLACE1), abs=1e-4)

    def test_independent_minimizer(self):
        res = optimize.minimize_scalar(lambda a: analysis.error_tuq(a, 7, 1.0).total, bounds=(0, 30), method="bounded")
        assert res.x == pytest.approx(optimal_alpha_tuq(7, LAPLACE1), abs=1e-4)
