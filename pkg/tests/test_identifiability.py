"""Tests for fracbayes.identifiability."""

import math

import numpy as np
import pytest
from scipy import optimize

from fracbayes.exceptions import ArgumentError, ConfigError
from fracbayes.identifiability import (
    Identifiability,
    TruthSpec,
    gaussian_location_mass,
    gaussian_location_sampler,
    identifiability,
    make_truth,
    truth_from_spec,
)
from fracbayes.run_logger import run_logger


def point_mass_sampler(rng, size):
    return np.zeros((size, 1))


# =============================================================================
# Truths
# =============================================================================


class TestTruths:
    """Built-in truth registry."""

    @pytest.mark.parametrize("name", ["constant", "cosine_mode", "additive_sine", "single_sine", "linear"])
    def test_bounded(self, name):
        truth = make_truth(name, 3)
        assert truth.check_bounded() <= truth.sup_bound + 1e-12

    def test_unknown(self):
        with pytest.raises(ConfigError, match="unknown truth"):
            make_truth("wavelet", 2)

    def test_support_outside_range(self):
        with pytest.raises(ConfigError):
            make_truth("single_sine", 2, support=(3,))

    def test_declared_bound_enforced(self):
        truth = TruthSpec("big", lambda X: 5 * X[:, 0], (1,), 1, sup_bound=1.0)
        with pytest.raises(ConfigError, match="above its bound"):
            truth.check_bounded()

    def test_from_spec(self):
        truth = truth_from_spec({"name": "linear", "support": [2], "coefficients": [3.0]}, 2)
        assert truth.support == (2,)
        assert truth(np.array([[0.1, 0.5]]))[0] == pytest.approx(1.5)


# =============================================================================
# Identifiability gap
# =============================================================================


class TestDeltaBasis:
    """Gap from tensor cosine coefficients."""

    def test_constant(self):
        gap = identifiability.delta_basis(make_truth("constant", 2, level=2.0))
        assert gap.delta_sq == pytest.approx(0.0, abs=1e-12)

    def test_single_cosine_mode(self):
        gap = identifiability.delta_basis(make_truth("cosine_mode", 2, support=(2,)))
        assert gap.delta_sq == pytest.approx(1.0, abs=1e-10)
        assert gap.tail == pytest.approx(0.0, abs=1e-10)

    def test_additive_sine(self):
        gap = identifiability.delta_basis(make_truth("additive_sine", 2))
        assert gap.delta_sq == pytest.approx(0.5, abs=1e-4)
        # both coordinates leave the same cosine tail beyond the truncation
        assert gap.tail == pytest.approx(2 * (0.5 - gap.delta_sq), abs=1e-8)
        assert set(gap.per_coordinate) == {1, 2}

    def test_interaction_counts_for_both_coordinates(self):
        truth = TruthSpec("product", lambda X: 2.0 * np.cos(math.pi * X[:, 0]) * np.cos(math.pi * X[:, 1]),
                          (1, 2), 2, 2.0)
        gap = identifiability.delta_basis(truth, trunc=4)
        assert gap.per_coordinate[1] == pytest.approx(1.0, abs=1e-10)
        assert gap.per_coordinate[2] == pytest.approx(1.0, abs=1e-10)

    def test_truncation_must_be_positive(self):
        with pytest.raises(ArgumentError):
            identifiability.delta_basis(make_truth("single_sine", 1), trunc=0)


class TestDeltaMonteCarlo:
    """Gap from nested Monte Carlo conditional variances."""

    def test_constant(self):
        gap = identifiability.delta_mc(make_truth("constant", 2), 200, 200, seed=0)
        assert gap.delta_sq == pytest.approx(0.0, abs=1e-12)

    def test_additive_sine(self):
        gap = identifiability.delta_mc(make_truth("additive_sine", 2), 500, 500, seed=1)
        assert abs(gap.delta_sq - 0.5) <= 3 * gap.se

    @pytest.mark.parametrize("name", ["additive_sine", "single_sine", "linear", "cosine_mode"])
    def test_agrees_with_basis(self, name):
        truth = make_truth(name, 2)
        basis = identifiability.delta_basis(truth)
        mc = identifiability.delta_mc(truth, 400, 400, seed=3)
        assert abs(basis.delta_sq - mc.delta_sq) <= 4 * mc.se + basis.tail + 1e-6

    def test_draw_counts(self):
        with pytest.raises(ArgumentError):
            identifiability.delta_mc(make_truth("single_sine", 1), 50, 500)


# =============================================================================
# KL ball
# =============================================================================


class TestKlBall:
    """Membership of the Gaussian-regression KL neighbourhood."""

    def test_truth_is_member(self):
        values = np.linspace(-1, 1, 10)
        assert identifiability.kl_ball_member(values, values, 1.0, 10, 1e-6)

    def test_closed_boundary(self):
        assert identifiability.kl_ball_member([0.5], [0.0], 1.0, 1, 0.5)
        assert not identifiability.kl_ball_member([0.5000001], [0.0], 1.0, 1, 0.5)

    @pytest.mark.parametrize("gap,member", [(0.29, True), (0.31, False)])
    def test_variance_binds(self, gap, member):
        truth = np.zeros(10)
        assert identifiability.kl_ball_member(truth + gap, truth, 1.0, 10, 0.3) is member

    def test_length_mismatch(self):
        with pytest.raises(ArgumentError):
            identifiability.kl_ball_member([0.0, 1.0], [0.0], 1.0, 2, 0.1)


# =============================================================================
# Local complexity
# =============================================================================


class TestLocalComplexity:
    """Prior masses of KL balls in the Gaussian location model."""

    def test_huge_radius(self):
        est = identifiability.local_complexity(gaussian_location_sampler(), [0.0], 1e3, 100,
                                               n_mc=1000, seed=0)
        assert est.mass == 1.0
        assert est.complexity == pytest.approx(0.0)
        assert not est.censored

    def test_matches_closed_form(self):
        est = identifiability.local_complexity(gaussian_location_sampler(), [0.0], 0.2, 100,
                                               n_mc=20_000, seed=1)
        oracle = gaussian_location_mass(0.2)
        assert abs(est.mass - oracle) <= 3 * math.sqrt(oracle * (1 - oracle) / 20_000)
        assert est.ci_low <= est.mass <= est.ci_high

    def test_censored_floor(self):
        est = identifiability.local_complexity(gaussian_location_sampler(), [0.0], 1e-9, 50,
                                               n_mc=1000, seed=2)
        assert est.censored
        assert est.complexity == pytest.approx(math.log(1000) / 50)
        assert run_logger.events("estimator_flag")

    def test_needs_enough_draws(self):
        with pytest.raises(ArgumentError):
            identifiability.local_complexity(gaussian_location_sampler(), [0.0], 0.1, 10, n_mc=100)

    def test_profile_is_monotone(self):
        grid = np.geomspace(1e-3, 3.0, 40)
        profile = identifiability.complexity_profile(gaussian_location_sampler(), [0.0], grid, 200,
                                                     n_mc=5000, seed=4)
        masses = [e.mass for e in profile]
        complexities = [e.complexity for e in profile]
        assert all(b >= a for a, b in zip(masses, masses[1:]))
        assert all(b <= a for a, b in zip(complexities, complexities[1:]))

    def test_parametric_log_n_growth(self):
        ns = [100, 1000, 10_000]
        scaled = []
        for n in ns:
            est = identifiability.local_complexity(gaussian_location_sampler(), [0.0],
                                                   math.sqrt(math.log(n) / n), n,
                                                   n_mc=100_000, seed=5)
            scaled.append(n * est.complexity)
        # n * complexity grows like half of log n
        growth = np.polyfit(np.log(ns), scaled, 1)[0]
        assert 0.2 <= growth <= 0.8


class TestCriticalRadius:
    """Smallest eps with complexity(eps) = alpha eps^2."""

    def test_point_mass_prior(self):
        eps = identifiability.critical_radius(point_mass_sampler, [0.0], 0.5, 100, n_mc=1000)
        assert eps == identifiability.radius_floor

    def test_matches_closed_form(self):
        n, alpha = 100, 0.5
        oracle = optimize.brentq(lambda e: -math.log(gaussian_location_mass(e)) / n - alpha * e ** 2,
                                 1e-3, 2.0)
        eps = identifiability.critical_radius(gaussian_location_sampler(), [0.0], alpha, n,
                                              seed=6, n_mc=20_000)
        assert eps == pytest.approx(oracle, rel=0.1)

    def test_nonincreasing_in_alpha(self):
        radii = [identifiability.critical_radius(gaussian_location_sampler(), [0.0], a, 100,
                                                 seed=7, n_mc=10_000) for a in (0.2, 0.4, 0.8)]
        assert radii[1] <= radii[0] + identifiability.radius_tol
        assert radii[2] <= radii[1] + identifiability.radius_tol

    def test_alpha_range(self):
        with pytest.raises(ArgumentError):
            identifiability.critical_radius(gaussian_location_sampler(), [0.0], 1.0, 100)


# =============================================================================
# Projection
# =============================================================================


class TestProjection:
    """Least-squares distance from the truth to covariate subsets."""

    def test_models_missing_a_coordinate_stay_away(self, rng):
        truth = make_truth("additive_sine", 3)
        X = rng.uniform(size=(2000, 3))
        values = truth(X)
        delta = identifiability.delta_basis(truth).delta
        for subset in [(), (1,), (2,), (1, 3), (2, 3), (3,)]:
            assert identifiability.projection_error(X, values, subset, trunc=4) >= delta - 0.03

    def test_true_support_fits(self, rng):
        truth = make_truth("additive_sine", 3)
        X = rng.uniform(size=(2000, 3))
        assert identifiability.projection_error(X, truth(X), (1, 2), trunc=12) <= 0.05

    def test_fresh_instance_defaults(self):
        assert Identifiability().truncation == identifiability.truncation
