"""Tests for fracbayes.divergence_lab."""

import math

import numpy as np
import pytest
from scipy import stats

from fracbayes.divergence_lab import (
    MONTE_CARLO,
    Density,
    DensityRatioSampler,
    DivergenceValue,
    density_from_spec,
    divergence_lab,
    from_scipy,
    laplace,
    normal,
    product,
    uniform,
)
from fracbayes.exceptions import ArgumentError, ConfigError, InvalidDensityError


def gaussian_kl(mu1, sd1, mu2, sd2):
    return math.log(sd2 / sd1) + (sd1 ** 2 + (mu1 - mu2) ** 2) / (2 * sd2 ** 2) - 0.5


# =============================================================================
# Density families
# =============================================================================


class TestDensities:
    """Built-in families integrate to one and validate their inputs."""

    @pytest.mark.parametrize("density", [
        normal(0.3, 1.7),
        uniform(-1.0, 2.0),
        laplace(0.5, 0.8),
        from_scipy(stats.gamma(2.5)),
    ])
    def test_total_mass_is_one(self, density):
        from scipy.integrate import quad

        lo, hi = density.lower[0], density.upper[0]
        mass, _ = quad(lambda x: float(density.density(np.array([x]))[0]), lo, hi,
                       points=[b for b in density.breakpoints[0] if lo < b < hi] or None,
                       limit=200)
        assert mass == pytest.approx(1.0, abs=1e-6)

    def test_product_has_box_support(self):
        d = product(normal(0, 1), uniform(0, 1))
        assert d.dim == 2
        assert d.lower == (-10.0, 0.0)
        assert d.upper == (10.0, 1.0)
        value = d.density(np.array([[0.0, 0.5]]))[0]
        assert value == pytest.approx(stats.norm.pdf(0.0))

    def test_negative_evaluator_is_rejected(self):
        bad = Density("bad", (0.0,), (1.0,), evaluator=lambda x: np.full(np.shape(x), -1.0))
        with pytest.raises(InvalidDensityError):
            bad.density(np.array([0.5]))

    def test_from_spec_builds_families(self):
        d = density_from_spec({"family": "normal", "mu": 1.0, "sd": 2.0})
        assert d.density(np.array([1.0]))[0] == pytest.approx(stats.norm.pdf(0, scale=2.0))
        g = density_from_spec({"family": "scipy", "name": "gamma", "args": [3.0]})
        assert g.lower[0] == 0.0

    def test_from_spec_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="unknown keys"):
            density_from_spec({"family": "normal", "mean": 1.0})

    def test_from_spec_rejects_unknown_family(self):
        with pytest.raises(ConfigError, match="unknown density family"):
            density_from_spec({"family": "cauchyish"})

    def test_negative_divergence_value_is_rejected(self):
        with pytest.raises(ArgumentError):
            DivergenceValue(-0.1)


# =============================================================================
# Closed-form oracles
# =============================================================================


class TestHellinger:
    """Hellinger distance against analytic overlap integrals."""

    def test_identical_densities(self):
        p = normal(0, 1)
        assert divergence_lab.hellinger(p, p).value <= 1e-10

    def test_shifted_uniforms(self):
        h = divergence_lab.hellinger(uniform(0, 1), uniform(0.5, 1.5))
        assert h.value ** 2 == pytest.approx(1.0, rel=1e-6)

    def test_gaussian_closed_form(self):
        h = divergence_lab.hellinger(normal(0, 1), normal(1, 1))
        assert h.value ** 2 == pytest.approx(2 * (1 - math.exp(-1 / 8)), rel=1e-6)

    def test_disjoint_supports_give_sqrt_two(self):
        h = divergence_lab.hellinger(uniform(0, 1), uniform(2, 3))
        assert h.value == math.sqrt(2.0)

    def test_symmetry(self):
        p, q = normal(0, 1), laplace(0.5, 1.5)
        assert divergence_lab.hellinger(p, q).value == pytest.approx(
            divergence_lab.hellinger(q, p).value, abs=1e-9)

    def test_invalid_density_raises(self):
        bad = Density("bad", (0.0,), (1.0,), evaluator=lambda x: np.full(np.shape(x), -1.0))
        with pytest.raises(InvalidDensityError):
            divergence_lab.hellinger(bad, uniform(0, 1))


class TestKullbackLeibler:
    """KL and V against Gaussian closed forms."""

    def test_identical_densities(self):
        p = laplace(0, 1)
        assert divergence_lab.kl(p, p).value <= 1e-10

    def test_unit_shift(self):
        assert divergence_lab.kl(normal(0, 1), normal(1, 1)).value == pytest.approx(0.5, rel=1e-6)

    def test_scale_change(self):
        expected = 0.5 * (0.25 - 1 + math.log(4))
        assert divergence_lab.kl(normal(0, 1), normal(0, 2)).value == pytest.approx(expected, rel=1e-6)

    def test_support_violation_gives_tagged_infinity(self):
        result = divergence_lab.kl(uniform(0, 1), uniform(0.5, 1.5))
        assert result.infinite
        assert math.isinf(result.value)
        assert "vanishes" in result.diagnostic

    def test_v_discrepancy_unit_slope(self):
        assert divergence_lab.v_discrepancy(normal(0, 1), normal(1, 1)).value == pytest.approx(1.0, rel=1e-6)

    def test_v_discrepancy_slope_two(self):
        assert divergence_lab.v_discrepancy(normal(0, 1), normal(2, 1)).value == pytest.approx(4.0, rel=1e-6)

    def test_v_discrepancy_identical(self):
        p = normal(0.2, 0.7)
        assert divergence_lab.v_discrepancy(p, p).value <= 1e-10

    def test_product_density_kl(self):
        p = product(normal(0, 1), normal(0, 1))
        q = product(normal(1, 1), normal(0, 1))
        assert divergence_lab.kl(p, q).value == pytest.approx(0.5, rel=1e-5)


class TestRenyiAndAffinity:
    """Renyi divergence and alpha-affinity."""

    @pytest.mark.parametrize("alpha,expected", [(0.5, 0.25), (0.9, 0.45)])
    def test_same_variance_gaussians(self, alpha, expected):
        d = divergence_lab.renyi(normal(0, 1), normal(1, 1), alpha)
        assert d.value == pytest.approx(expected, rel=1e-6)

    def test_identical_densities(self):
        p = normal(0, 1)
        for alpha in (0.1, 0.5, 0.9):
            assert divergence_lab.renyi(p, p, alpha).value <= 1e-8
            assert divergence_lab.affinity(p, p, alpha).value == pytest.approx(1.0, abs=1e-9)

    def test_half_affinity_is_hellinger_affinity(self):
        p, q = normal(0, 1), laplace(0.3, 1.2)
        a = divergence_lab.affinity(p, q, 0.5).value
        h2 = divergence_lab.hellinger(p, q).value ** 2
        assert a == pytest.approx(1 - h2 / 2, abs=1e-8)

    def test_gaussian_affinity(self):
        a = divergence_lab.affinity(normal(0, 1), normal(1, 1), 0.5)
        assert a.value == pytest.approx(math.exp(-1 / 8), rel=1e-6)

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.5, 1.5])
    def test_alpha_outside_open_interval(self, alpha):
        with pytest.raises(ArgumentError):
            divergence_lab.renyi(normal(0, 1), normal(1, 1), alpha)

    def test_disjoint_affinity_is_zero(self):
        assert divergence_lab.affinity(uniform(0, 1), uniform(3, 4), 0.5).value == 0.0
        assert divergence_lab.renyi(uniform(0, 1), uniform(3, 4), 0.5).infinite


# =============================================================================
# Properties on randomized Gaussian pairs
# =============================================================================


class TestProperties:
    """Nonnegativity, affinity bounds and monotonicity in alpha."""

    @pytest.fixture
    def pairs(self, rng):
        out = []
        for _ in range(5):
            mu1, mu2 = rng.normal(size=2)
            sd1, sd2 = rng.uniform(0.5, 2.0, size=2)
            out.append((normal(mu1, sd1), normal(mu2, sd2), (mu1, sd1, mu2, sd2)))
        return out

    def test_nonnegative_and_bounded(self, pairs):
        for p, q, _ in pairs:
            assert 0 <= divergence_lab.hellinger(p, q).value <= math.sqrt(2)
            assert divergence_lab.kl(p, q).value >= 0
            assert divergence_lab.v_discrepancy(p, q).value >= 0
            a = divergence_lab.affinity(p, q, 0.3).value
            assert 0 <= a <= 1

    def test_kl_matches_closed_form(self, pairs):
        for p, q, params in pairs:
            assert divergence_lab.kl(p, q).value == pytest.approx(gaussian_kl(*params), rel=1e-6)

    def test_renyi_nondecreasing_in_alpha(self, pairs):
        grid = np.round(np.arange(0.1, 1.0, 0.1), 1)
        for p, q, _ in pairs:
            values = [divergence_lab.renyi(p, q, float(a)).value for a in grid]
            assert all(b >= a - 1e-9 for a, b in zip(values, values[1:]))


class TestMonteCarlo:
    """Monte Carlo estimators agree with quadrature and are seed-deterministic."""

    @pytest.mark.parametrize("measure,alpha", [
        ("kl", None), ("v", None), ("hellinger", None), ("renyi", 0.5), ("affinity", 0.7),
    ])
    def test_agrees_with_quadrature(self, measure, alpha):
        p, q = normal(0, 1), normal(0.8, 1.3)
        exact = divergence_lab.measure(measure, p, q, alpha=alpha)
        mc = divergence_lab.measure(measure, p, q, alpha=alpha,
                                    estimator=MONTE_CARLO, n_mc=100_000, seed=7)
        assert mc.estimator == MONTE_CARLO
        assert mc.se > 0
        assert abs(mc.value - exact.value) <= 4 * mc.se

    def test_same_seed_same_bits(self):
        p, q = normal(0, 1), laplace(1, 1)
        a = divergence_lab.kl(p, q, estimator=MONTE_CARLO, n_mc=5000, seed=11)
        b = divergence_lab.kl(p, q, estimator=MONTE_CARLO, n_mc=5000, seed=11)
        assert a.value == b.value and a.se == b.se

    def test_sampler_required(self):
        p = Density("no-sampler", (0.0,), (1.0,), evaluator=lambda x: np.ones(np.shape(x)))
        with pytest.raises(ArgumentError, match="no sampler"):
            divergence_lab.kl(p, uniform(0, 1), estimator=MONTE_CARLO)


class TestFractionalIdentity:
    """E[(p_theta / p_star)^alpha] under the truth equals exp{-(1-alpha) D_alpha}."""

    def test_identical_models_are_degenerate(self):
        sampler = DensityRatioSampler(normal(0, 1), normal(0, 1))
        report = divergence_lab.fractional_identity_check(sampler, 0.5, 1000, seed=1)
        assert report.mean == pytest.approx(1.0)
        assert report.theory == pytest.approx(1.0, abs=1e-9)
        assert report.degenerate
        assert report.passed

    @pytest.mark.parametrize("alt,alpha", [
        (normal(1, 1), 0.5), (normal(1, 1), 0.9), (normal(0.5, 1), 0.3),
        (normal(0, 1.5), 0.5), (laplace(0, 1), 0.5), (normal(-1, 0.8), 0.7),
    ])
    def test_monte_carlo_matches_theory(self, alt, alpha):
        sampler = DensityRatioSampler(alt, normal(0, 1))
        report = divergence_lab.fractional_identity_check(sampler, alpha, 100_000, seed=3)
        assert abs(report.mean - report.theory) <= 4 * report.se
        assert not report.degenerate

    def test_unit_shift_theory_value(self):
        sampler = DensityRatioSampler(normal(1, 1), normal(0, 1))
        report = divergence_lab.fractional_identity_check(sampler, 0.5, 10_000, seed=5)
        assert report.theory == pytest.approx(math.exp(-1 / 8), rel=1e-6)
        report = divergence_lab.fractional_identity_check(sampler, 0.9, 10_000, seed=5)
        assert report.theory == pytest.approx(math.exp(-0.1 * 0.45), rel=1e-6)
