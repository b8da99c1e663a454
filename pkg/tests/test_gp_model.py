"""Tests for fracbayes.gp_model."""

import math

import numpy as np
import pytest
from scipy import integrate, stats

from fracbayes.exceptions import ArgumentError, CholeskyError, ConfigError, RetryBudgetError
from fracbayes.gp_model import (
    GpConfig,
    RegressionData,
    gp_model,
    se_gram,
    stable_cholesky,
)


@pytest.fixture
def cfg():
    return GpConfig(noise_sd=0.5)


@pytest.fixture
def two_points():
    return RegressionData(np.array([[0.2, 0.9], [0.7, 0.1]]), np.array([0.3, -0.4]))


@pytest.fixture
def sine_data(rng):
    X = rng.uniform(size=(25, 3))
    y = np.sin(2 * np.pi * X[:, 0]) + 0.5 * rng.normal(size=25)
    return RegressionData(X, y)


def brute_force_integrals(data, a, sigma):
    """Evidence and posterior mean of f(x_1) by 2-d quadrature over (f_1, f_2)."""
    K = se_gram(data.X[:, :1], data.X[:, :1], a)
    Kinv = np.linalg.inv(K)
    prior_const = 1.0 / (2 * np.pi * math.sqrt(np.linalg.det(K)))
    lik_const = 1.0 / (2 * np.pi * sigma ** 2)
    y1, y2 = data.y

    def joint(f2, f1):
        quad_prior = Kinv[0, 0] * f1 * f1 + 2 * Kinv[0, 1] * f1 * f2 + Kinv[1, 1] * f2 * f2
        resid = (y1 - f1) ** 2 + (y2 - f2) ** 2
        return lik_const * prior_const * math.exp(-0.5 * resid / sigma ** 2 - 0.5 * quad_prior)

    evidence, _ = integrate.dblquad(joint, -6, 6, -6, 6, epsabs=1e-13, epsrel=1e-11)
    first, _ = integrate.dblquad(lambda f2, f1: f1 * joint(f2, f1), -6, 6, -6, 6,
                                 epsabs=1e-13, epsrel=1e-11)
    return evidence, first / evidence


# =============================================================================
# Configuration and data
# =============================================================================


class TestConfigAndData:
    """GpConfig and RegressionData validation."""

    def test_defaults_are_positive(self):
        cfg = GpConfig()
        assert cfg.noise_sd > 0 and cfg.grid_size >= 3

    @pytest.mark.parametrize("field,value", [
        ("noise_sd", 0.0), ("prior_shape", -1.0), ("smoothness", 0.0), ("sup_norm_cap", 0.0),
    ])
    def test_nonpositive_fields_rejected(self, field, value):
        with pytest.raises(ConfigError):
            GpConfig(**{field: value})

    def test_grid_size_floor(self):
        with pytest.raises(ConfigError):
            GpConfig(grid_size=2)

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="unknown gp keys"):
            GpConfig.from_dict({"noise": 0.5})

    def test_from_dict_infinite_cap(self):
        assert math.isinf(GpConfig.from_dict({"sup_norm_cap": "inf"}).sup_norm_cap)

    def test_design_must_lie_in_unit_cube(self):
        with pytest.raises(ArgumentError):
            RegressionData(np.array([[1.5]]), np.array([0.0]))

    def test_columns_are_one_based(self):
        data = RegressionData(np.array([[0.1, 0.2, 0.3]]), np.array([1.0]))
        assert data.columns((1, 3)).tolist() == [[0.1, 0.3]]


class TestCholesky:
    """Jittered Cholesky factorisation."""

    def test_singular_matrix_gets_jitter(self):
        factor, jitter = stable_cholesky(np.ones((3, 3)))
        assert jitter > 0
        assert np.allclose(factor @ factor.T, np.ones((3, 3)), atol=1e-6)

    def test_indefinite_matrix_raises(self):
        with pytest.raises(CholeskyError):
            stable_cholesky(-np.eye(3))


# =============================================================================
# Fractional marginal likelihood
# =============================================================================


class TestFractionalMarginal:
    """log of the alpha-powered likelihood integrated under the GP prior."""

    def test_empty_model_single_point(self, cfg):
        data = RegressionData(np.array([[0.4]]), np.array([0.8]))
        value = gp_model.log_fractional_marginal(data, (), 1.0, cfg, 1.0)
        assert value == pytest.approx(stats.norm.logpdf(0.8, scale=0.5), abs=1e-12)

    def test_two_points_match_quadrature(self, cfg, two_points):
        evidence, _ = brute_force_integrals(two_points, 2.0, 0.5)
        value = gp_model.log_fractional_marginal(two_points, (1,), 2.0, cfg, 1.0)
        assert value == pytest.approx(math.log(evidence), abs=1e-6)

    def test_continuity_at_one(self, cfg, sine_data):
        a = gp_model.log_fractional_marginal(sine_data, (1, 2), 3.0, cfg, 1.0)
        b = gp_model.log_fractional_marginal(sine_data, (1, 2), 3.0, cfg, 0.999999)
        assert abs(a - b) < 1e-3

    @pytest.mark.parametrize("alpha", [0.2, 0.5, 0.9])
    def test_noise_rescaling_identity(self, cfg, sine_data, alpha):
        n = sine_data.n
        frac = gp_model.log_fractional_marginal(sine_data, (1, 3), 2.5, cfg, alpha)
        rescaled = GpConfig(noise_sd=cfg.noise_sd / math.sqrt(alpha))
        regular = gp_model.log_fractional_marginal(sine_data, (1, 3), 2.5, rescaled, 1.0)
        log_c = gp_model.log_fractional_constant(alpha, n, cfg.noise_sd)
        assert frac - log_c == pytest.approx(regular, abs=1e-10)

    def test_constant_vanishes_at_one(self):
        assert gp_model.log_fractional_constant(1.0, 40, 0.7) == 0.0

    def test_row_permutation_invariance(self, cfg, sine_data, rng):
        perm = rng.permutation(sine_data.n)
        shuffled = RegressionData(sine_data.X[perm], sine_data.y[perm])
        for alpha in (0.5, 1.0):
            a = gp_model.log_fractional_marginal(sine_data, (1, 2), 4.0, cfg, alpha)
            b = gp_model.log_fractional_marginal(shuffled, (1, 2), 4.0, cfg, alpha)
            assert a == pytest.approx(b, abs=1e-10)

    def test_no_data_gives_zero(self, cfg):
        data = RegressionData(np.empty((0, 3)), np.empty(0))
        assert gp_model.log_fractional_marginal(data, (1,), 1.0, cfg, 0.5) == 0.0

    @pytest.mark.parametrize("alpha", [0.0, -0.1, 1.5])
    def test_alpha_range(self, cfg, two_points, alpha):
        with pytest.raises(ArgumentError):
            gp_model.log_fractional_marginal(two_points, (1,), 1.0, cfg, alpha)


class TestBandwidthIntegration:
    """Integration against the truncated bandwidth hyperprior."""

    def test_single_node_is_the_marginal(self, cfg, sine_data):
        integrated = gp_model.integrate_bandwidth(sine_data, (1,), cfg, 0.5, nodes=[3.0])
        fixed = gp_model.log_fractional_marginal(sine_data, (1,), 3.0, cfg, 0.5)
        assert integrated == pytest.approx(fixed, abs=1e-12)

    def test_weights_are_normalised(self, cfg):
        nodes = gp_model.bandwidth_nodes(100, 2, cfg)
        log_w = gp_model.log_bandwidth_weights(nodes, 2, cfg)
        assert nodes.size == cfg.grid_size
        assert nodes[0] == pytest.approx(100 ** 0.25)
        assert nodes[-1] == pytest.approx(400.0)
        assert np.exp(log_w).sum() == pytest.approx(1.0)

    def test_grid_refinement(self, rng):
        X = rng.uniform(size=(30, 2))
        data = RegressionData(X, 0.5 * rng.normal(size=30))
        coarse = gp_model.integrate_bandwidth(data, (1,), GpConfig(grid_size=32), 1.0)
        fine = gp_model.integrate_bandwidth(data, (1,), GpConfig(grid_size=64), 1.0)
        assert abs(coarse - fine) < 1e-2

    def test_concentrated_prior_recovers_fixed_bandwidth(self, sine_data):
        tight = GpConfig(noise_sd=0.5, prior_shape=1e4, prior_scale=10.0 / 1e4)
        nodes = np.linspace(8.0, 12.0, 401)
        integrated = gp_model.integrate_bandwidth(sine_data, (1,), tight, 1.0, nodes=nodes)
        fixed = gp_model.log_fractional_marginal(sine_data, (1,), 10.0, tight, 1.0)
        assert integrated == pytest.approx(fixed, abs=1e-2)

    def test_empty_range_is_a_config_error(self, sine_data):
        with pytest.raises(ConfigError, match="empty bandwidth range"):
            gp_model.integrate_bandwidth(sine_data, (1,), GpConfig(a_max=1.0), 1.0)

    def test_empty_subset_rejected(self, cfg, sine_data):
        with pytest.raises(ArgumentError):
            gp_model.integrate_bandwidth(sine_data, (), cfg, 1.0)

    def test_map_bandwidth_is_a_node(self, cfg, sine_data):
        a = gp_model.map_bandwidth(sine_data, (1,), cfg, 1.0)
        assert a in set(gp_model.bandwidth_nodes(sine_data.n, 1, cfg).tolist())


# =============================================================================
# Prior draws and predictive means
# =============================================================================


class TestPriorSample:
    """GP prior draws with sup-norm rejection."""

    def test_tiny_bandwidth_gives_flat_draws(self, cfg):
        points = np.linspace(0, 1, 5)
        draw = gp_model.gp_prior_sample((1,), 1e-6, points, cfg, seed=3)
        assert np.max(draw) - np.min(draw) < 1e-3

    def test_unit_marginal_variance(self):
        cfg = GpConfig(sup_norm_cap=math.inf)
        draws = np.array([gp_model.gp_prior_sample((1,), 2.0, np.array([0.5]), cfg, seed=s)[0]
                          for s in range(10_000)])
        se = math.sqrt(2.0 / draws.size)
        assert abs(draws.var(ddof=1) - 1.0) <= 4 * se

    def test_far_points_decorrelate(self):
        cfg = GpConfig(sup_norm_cap=math.inf)
        draws = np.array([gp_model.gp_prior_sample((1,), 50.0, np.array([0.0, 1.0]), cfg, seed=s)
                          for s in range(10_000)])
        corr = np.corrcoef(draws[:, 0], draws[:, 1])[0, 1]
        assert abs(corr) <= 4 / math.sqrt(10_000)

    def test_rejection_budget(self):
        cfg = GpConfig(sup_norm_cap=1e-3)
        with pytest.raises(RetryBudgetError, match="sup_norm_cap"):
            gp_model.gp_prior_sample((1,), 2.0, np.linspace(0, 1, 20), cfg, seed=0)

    def test_empty_subset_is_zero_function(self, cfg):
        assert np.all(gp_model.gp_prior_sample((), 2.0, np.zeros((4, 0)), cfg, seed=0) == 0)

    def test_same_seed_same_draw(self, cfg):
        points = np.random.default_rng(0).uniform(size=(10, 2))
        a = gp_model.gp_prior_sample((1, 2), 3.0, points, cfg, seed=9)
        b = gp_model.gp_prior_sample((1, 2), 3.0, points, cfg, seed=9)
        assert np.array_equal(a, b)


class TestPredictiveMean:
    """Posterior predictive mean."""

    def test_interpolates_with_vanishing_noise(self):
        X = np.array([[0.1], [0.4], [0.7], [0.95]])
        y = np.array([0.3, -0.2, 1.1, 0.5])
        data = RegressionData(X, y)
        cfg = GpConfig(noise_sd=1e-6)
        pred = gp_model.posterior_predictive_mean(data, (1,), 3.0, cfg, 1.0, X)
        assert np.allclose(pred, y, atol=1e-4)

    def test_matches_quadrature(self, cfg, two_points):
        _, mean = brute_force_integrals(two_points, 2.0, 0.5)
        pred = gp_model.posterior_predictive_mean(two_points, (1,), 2.0, cfg, 1.0,
                                                  two_points.X[:1])
        assert pred[0] == pytest.approx(mean, abs=1e-6)

    def test_halving_alpha_doubles_noise_variance(self, sine_data):
        test = np.random.default_rng(1).uniform(size=(7, 3))
        frac = gp_model.posterior_predictive_mean(sine_data, (1, 2), 3.0, GpConfig(noise_sd=0.5),
                                                  0.5, test)
        regular = gp_model.posterior_predictive_mean(sine_data, (1, 2), 3.0,
                                                     GpConfig(noise_sd=0.5 * math.sqrt(2)), 1.0, test)
        assert np.allclose(frac, regular, atol=1e-10)
