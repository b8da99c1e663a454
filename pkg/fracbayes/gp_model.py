"""
Gaussian-process regression per covariate subset
Fractional marginal likelihoods, bandwidth integration, prior draws and
predictive means under the squared-exponential kernel
"""

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, stats
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from config import (
    BANDWIDTH_GRID_SIZE, BANDWIDTH_MAX_FACTOR, BANDWIDTH_PRIOR_SCALE,
    BANDWIDTH_PRIOR_SHAPE, DEFAULT_NOISE_SD, DEFAULT_SMOOTHNESS, JITTER_BASE,
    JITTER_GROWTH, JITTER_MAX_RETRIES, PRIOR_SAMPLE_RETRIES, SUP_NORM_CAP,
)
from fracbayes.exceptions import (
    ArgumentError, CholeskyError, ConfigError, RetryBudgetError,
)
from fracbayes.run_logger import run_logger

logger = logging.getLogger(__name__)

Subset = Tuple[int, ...]
SeedLike = Union[int, np.random.Generator]


@dataclass(frozen=True)
class GpConfig:
    """Noise level, bandwidth hyperprior and quadrature settings"""

    noise_sd: float = DEFAULT_NOISE_SD
    prior_shape: float = BANDWIDTH_PRIOR_SHAPE
    prior_scale: float = BANDWIDTH_PRIOR_SCALE
    smoothness: float = DEFAULT_SMOOTHNESS
    sup_norm_cap: float = SUP_NORM_CAP
    grid_size: int = BANDWIDTH_GRID_SIZE
    max_factor: float = BANDWIDTH_MAX_FACTOR
    a_max: Optional[float] = None

    def __post_init__(self):
        for name in ("noise_sd", "prior_shape", "prior_scale", "smoothness",
                     "sup_norm_cap", "max_factor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"GpConfig.{name} must be positive, got {getattr(self, name)}")
        if self.grid_size < 3:
            raise ConfigError("GpConfig.grid_size must be at least 3")
        if self.a_max is not None and not self.a_max > 0:
            raise ConfigError("GpConfig.a_max must be positive")

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "GpConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown gp keys: {sorted(unknown)}")
        if data.get("sup_norm_cap") in ("inf", "infinity"):
            data["sup_norm_cap"] = math.inf
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def bandwidth_range(self, n: int, d: int) -> Tuple[float, float]:
        """[n^(1/(2 beta + d)), a_max] with a_max = max_factor * n unless set"""
        lower = float(n) ** (1.0 / (2.0 * self.smoothness + d))
        upper = self.a_max if self.a_max is not None else self.max_factor * n
        return lower, float(upper)


@dataclass(frozen=True)
class RegressionData:
    """Design X in [0,1]^p and responses y"""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.ndim != 2:
            raise ArgumentError("design matrix must be two-dimensional")
        if X.shape[0] != y.shape[0]:
            raise ArgumentError(f"design has {X.shape[0]} rows but y has {y.shape[0]} entries")
        if X.size and (X.min() < 0.0 or X.max() > 1.0):
            raise ArgumentError("design entries must lie in [0,1]")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.X.shape[1])

    def columns(self, subset: Sequence[int]) -> np.ndarray:
        """Covariates of a 1-based subset"""
        return self.X[:, [i - 1 for i in subset]]


def stable_cholesky(matrix: np.ndarray, source: str = "cholesky",
                    always_jitter: bool = False) -> Tuple[np.ndarray, float]:
    """Lower Cholesky factor, adding trace-scaled jitter on failure"""
    size = matrix.shape[0]
    scale = max(float(np.trace(matrix)), 1e-300)
    jitter = JITTER_BASE * scale if always_jitter else 0.0

    for attempt in range(JITTER_MAX_RETRIES + 1):
        try:
            factor = linalg.cholesky(matrix + jitter * np.eye(size), lower=True)
            if attempt > 0:
                run_logger.log_numerical_warning(
                    source, f"Cholesky needed jitter {jitter:.3g} after {attempt} retries",
                    jitter=jitter, relative_jitter=jitter / scale,
                )
            return factor, jitter
        except linalg.LinAlgError:
            jitter = JITTER_BASE * scale if jitter == 0.0 else jitter * JITTER_GROWTH

    raise CholeskyError(
        f"{source}: matrix of size {size} not positive definite after "
        f"{JITTER_MAX_RETRIES} jitter escalations (last jitter {jitter / JITTER_GROWTH:.3g})"
    )


def se_gram(left: np.ndarray, right: np.ndarray, a: float) -> np.ndarray:
    """Squared-exponential kernel exp(-a^2 |x - x'|^2) between two point sets"""
    return np.exp(-(a ** 2) * cdist(left, right, "sqeuclidean"))


class GaussianProcessModel:
    """Exact fractional marginal likelihoods for Gaussian-noise GP regression"""

    def __init__(self, config: Optional[GpConfig] = None):
        self.config = config or GpConfig()

    @staticmethod
    def _check_alpha(alpha: float):
        if not 0.0 < alpha <= 1.0:
            raise ArgumentError(f"alpha must lie in (0,1], got {alpha}")

    @staticmethod
    def log_fractional_constant(alpha: float, n: int, sigma: float) -> float:
        """log c with c = (2 pi sigma^2)^(-n alpha / 2) (2 pi sigma^2 / alpha)^(n / 2)"""
        return (-(n * alpha / 2.0) * math.log(2.0 * math.pi * sigma ** 2)
                + (n / 2.0) * math.log(2.0 * math.pi * sigma ** 2 / alpha))

    def _log_marginal_from_sqdist(self, y: np.ndarray, sqdist: Optional[np.ndarray], a: float,
                                  sigma: float, alpha: float) -> float:
        n = y.shape[0]
        noise = sigma ** 2 / alpha
        cov = noise * np.eye(n)
        if sqdist is not None:
            cov = cov + np.exp(-(a ** 2) * sqdist)
        factor, _ = stable_cholesky(cov, "gp marginal")
        z = linalg.solve_triangular(factor, y, lower=True)
        log_normal = (-0.5 * float(z @ z) - float(np.sum(np.log(np.diag(factor))))
                      - 0.5 * n * math.log(2.0 * math.pi))
        return self.log_fractional_constant(alpha, n, sigma) + log_normal

    def log_fractional_marginal(self, data: RegressionData, subset: Subset, a: float,
                                cfg: Optional[GpConfig] = None, alpha: float = 1.0) -> float:
        """log of the integral of the alpha-powered Gaussian likelihood under the GP prior"""
        cfg = cfg or self.config
        self._check_alpha(alpha)
        if not a > 0:
            raise ArgumentError(f"bandwidth a must be positive, got {a}")
        if data.n == 0:
            return 0.0
        sqdist = None
        if subset:
            cols = data.columns(subset)
            sqdist = cdist(cols, cols, "sqeuclidean")
        return self._log_marginal_from_sqdist(data.y, sqdist, a, cfg.noise_sd, alpha)

    def bandwidth_nodes(self, n: int, d: int, cfg: Optional[GpConfig] = None,
                        grid_size: Optional[int] = None) -> np.ndarray:
        """Log-spaced bandwidth nodes on the truncated prior range"""
        cfg = cfg or self.config
        lower, upper = cfg.bandwidth_range(n, d)
        if upper < lower:
            raise ConfigError(
                f"empty bandwidth range: a_max={upper:g} below n^(1/(2 beta + d))={lower:g}"
            )
        return np.geomspace(lower, upper, grid_size or cfg.grid_size)

    def log_bandwidth_weights(self, nodes: np.ndarray, d: int,
                              cfg: Optional[GpConfig] = None) -> np.ndarray:
        """Normalised log quadrature weights of the truncated bandwidth prior

        A^d ~ Gamma(shape, scale) gives A the density f(a^d) d a^(d-1); the
        trapezoid rule runs in log a, hence the extra Jacobian a.
        """
        cfg = cfg or self.config
        nodes = np.sort(np.asarray(nodes, dtype=float))
        log_prior = (stats.gamma.logpdf(nodes ** d, a=cfg.prior_shape, scale=cfg.prior_scale)
                     + math.log(d) + (d - 1) * np.log(nodes))
        if nodes.size == 1:
            return np.zeros(1)
        u = np.log(nodes)
        trapezoid = np.empty_like(u)
        trapezoid[0] = (u[1] - u[0]) / 2.0
        trapezoid[-1] = (u[-1] - u[-2]) / 2.0
        trapezoid[1:-1] = (u[2:] - u[:-2]) / 2.0
        log_w = log_prior + u + np.log(trapezoid)
        return log_w - logsumexp(log_w)

    def _node_marginals(self, data: RegressionData, subset: Subset, nodes: np.ndarray,
                        cfg: GpConfig, alpha: float) -> np.ndarray:
        cols = data.columns(subset)
        sqdist = cdist(cols, cols, "sqeuclidean")
        return np.array([
            self._log_marginal_from_sqdist(data.y, sqdist, float(a), cfg.noise_sd, alpha)
            for a in nodes
        ])

    def integrate_bandwidth(self, data: RegressionData, subset: Subset,
                            cfg: Optional[GpConfig] = None, alpha: float = 1.0,
                            n: Optional[int] = None,
                            nodes: Optional[Sequence[float]] = None) -> float:
        """log of the fractional marginal integrated against the truncated bandwidth prior"""
        cfg = cfg or self.config
        self._check_alpha(alpha)
        if not subset:
            raise ArgumentError("bandwidth integration needs a nonempty subset")
        if data.n == 0:
            return 0.0
        n = data.n if n is None else n
        d = len(subset)
        nodes = (self.bandwidth_nodes(n, d, cfg) if nodes is None
                 else np.sort(np.asarray(nodes, dtype=float)))
        log_w = self.log_bandwidth_weights(nodes, d, cfg)
        return float(logsumexp(log_w + self._node_marginals(data, subset, nodes, cfg, alpha)))

    def map_bandwidth(self, data: RegressionData, subset: Subset,
                      cfg: Optional[GpConfig] = None, alpha: float = 1.0) -> float:
        """Bandwidth node maximising marginal times prior weight"""
        cfg = cfg or self.config
        if not subset or data.n == 0:
            return math.nan
        nodes = self.bandwidth_nodes(data.n, len(subset), cfg)
        score = (self.log_bandwidth_weights(nodes, len(subset), cfg)
                 + self._node_marginals(data, subset, nodes, cfg, alpha))
        return float(nodes[int(np.argmax(score))])

    def gp_prior_sample(self, subset: Subset, a: float, points: np.ndarray,
                        cfg: Optional[GpConfig] = None, seed: SeedLike = 0) -> np.ndarray:
        """One prior draw at the given points, conditioned on sup |f| <= cap by rejection"""
        cfg = cfg or self.config
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        if not subset:
            return np.zeros(points.shape[0])
        if points.shape[1] != len(subset):
            raise ArgumentError(f"points have {points.shape[1]} coordinates, subset has {len(subset)}")
        if points.size and (points.min() < 0.0 or points.max() > 1.0):
            raise ArgumentError("prior sample points must lie in [0,1]")

        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        factor, _ = stable_cholesky(se_gram(points, points, a), "gp prior", always_jitter=True)
        for _ in range(PRIOR_SAMPLE_RETRIES):
            draw = factor @ rng.standard_normal(points.shape[0])
            if np.max(np.abs(draw)) <= cfg.sup_norm_cap:
                return draw
        raise RetryBudgetError(
            f"no prior draw with sup norm <= {cfg.sup_norm_cap:g} in {PRIOR_SAMPLE_RETRIES} "
            "tries; increase sup_norm_cap"
        )

    def posterior_predictive_mean(self, data: RegressionData, subset: Subset, a: float,
                                  cfg: Optional[GpConfig] = None, alpha: float = 1.0,
                                  test_points: Optional[np.ndarray] = None) -> np.ndarray:
        """k_*^T (K + sigma^2 / alpha I)^(-1) y at full-covariate test points"""
        cfg = cfg or self.config
        self._check_alpha(alpha)
        test_points = np.atleast_2d(np.asarray(test_points, dtype=float))
        if not subset or data.n == 0:
            return np.zeros(test_points.shape[0])
        cols = data.columns(subset)
        test_cols = test_points[:, [i - 1 for i in subset]]
        cov = se_gram(cols, cols, a) + (cfg.noise_sd ** 2 / alpha) * np.eye(data.n)
        factor, _ = stable_cholesky(cov, "gp predictive")
        weights = linalg.cho_solve((factor, True), data.y)
        return se_gram(test_cols, cols, a) @ weights


# Global GP model instance
gp_model = GaussianProcessModel()
