"""
Identifiability gaps and local Bayesian complexity
Gap of the true support by cosine-basis quadrature and by nested Monte Carlo,
KL-ball membership for Gaussian regression, prior ball masses, critical radii
and least-squares projection errors
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from config import (
    COMPLEXITY_MIN_DRAWS, CRITICAL_RADIUS_FLOOR, CRITICAL_RADIUS_TOL,
    DELTA_TRUNCATION, SUP_NORM_GRID_SIZE,
)
from fracbayes.exceptions import (
    ArgumentError, BracketError, ConfigError, QuadratureError,
)
from fracbayes.run_logger import run_logger

logger = logging.getLogger(__name__)

PriorSampler = Callable[[np.random.Generator, int], np.ndarray]


@dataclass(frozen=True)
class TruthSpec:
    """A bounded regression function on [0,1]^p depending only on its support"""

    name: str
    function: Callable[[np.ndarray], np.ndarray]
    support: Tuple[int, ...]
    p: int
    sup_bound: float
    smoothness: float = 1.0
    params: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        support = tuple(sorted(int(j) for j in self.support))
        if any(j < 1 or j > self.p for j in support):
            raise ConfigError(f"truth support {support} outside 1..{self.p}")
        object.__setattr__(self, "support", support)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.asarray(self.function(X), dtype=float).reshape(X.shape[0])

    def check_bounded(self, seed: int = 0) -> float:
        """Largest |f| on a uniform sample; raises if above the declared bound"""
        sample = np.random.default_rng(seed).uniform(size=(SUP_NORM_GRID_SIZE, self.p))
        top = float(np.max(np.abs(self(sample))))
        if top > self.sup_bound * (1 + 1e-12):
            raise ConfigError(f"truth {self.name} reaches {top:.4g} above its bound {self.sup_bound:g}")
        return top


@dataclass
class GapEstimate:
    """Squared gap of the true support, per coordinate and minimised"""

    delta_sq: float
    per_coordinate: Dict[int, float]
    se: float = 0.0
    tail: float = 0.0
    method: str = "basis"

    @property
    def delta(self) -> float:
        return math.sqrt(max(self.delta_sq, 0.0))


@dataclass
class ComplexityEstimate:
    """Prior mass of a KL ball and the local complexity it implies"""

    epsilon: float
    n: int
    mass: float
    complexity: float
    n_mc: int
    hits: int
    se: float
    ci_low: float
    ci_high: float
    censored: bool

    def row(self) -> List[Any]:
        return [self.epsilon, self.mass, self.se, self.complexity, int(self.censored)]


def _column(X: np.ndarray, j: int) -> np.ndarray:
    return X[:, j - 1]


def make_truth(name: str, p: int, support: Optional[Sequence[int]] = None, **params) -> TruthSpec:
    """Built-in truths: constant, cosine_mode, additive_sine, single_sine, linear"""
    if p < 1:
        raise ConfigError("truth needs p >= 1")
    if name == "constant":
        level = float(params.get("level", 1.0))
        support = tuple(support or (1,))
        return TruthSpec(name, lambda X: np.full(X.shape[0], level), support, p, abs(level),
                         params={"level": level})
    if name == "cosine_mode":
        k = int(params.get("k", 1))
        support = tuple(support or (1,))
        if len(support) != 1:
            raise ConfigError("cosine_mode has a single active coordinate")
        j = support[0]
        return TruthSpec(name, lambda X: math.sqrt(2.0) * np.cos(k * math.pi * _column(X, j)),
                         support, p, math.sqrt(2.0), smoothness=math.inf, params={"k": k})
    if name == "additive_sine":
        support = tuple(support or (1, 2))
        return TruthSpec(name, lambda X: sum(np.sin(2 * math.pi * _column(X, j)) for j in support),
                         support, p, float(len(support)), smoothness=math.inf)
    if name == "single_sine":
        support = tuple(support or (1,))
        return TruthSpec(name, lambda X: np.sin(2 * math.pi * _column(X, support[0])),
                         support[:1], p, 1.0, smoothness=math.inf)
    if name == "linear":
        support = tuple(support or (1,))
        coef = [float(c) for c in params.get("coefficients", [1.0] * len(support))]
        if len(coef) != len(support):
            raise ConfigError("linear truth needs one coefficient per active coordinate")
        return TruthSpec(name, lambda X: sum(c * _column(X, j) for c, j in zip(coef, support)),
                         support, p, float(sum(abs(c) for c in coef)), smoothness=math.inf,
                         params={"coefficients": coef})
    raise ConfigError(f"unknown truth '{name}'")


def truth_from_spec(spec: Dict[str, Any], p: int) -> TruthSpec:
    """Truth from a config block {"name": ..., "support": [...], ...}"""
    spec = dict(spec)
    name = spec.pop("name", None)
    if not name:
        raise ConfigError("truth block needs a name")
    support = spec.pop("support", None)
    return make_truth(name, p, support, **spec)


def gaussian_location_sampler(prior_sd: float = 1.0) -> PriorSampler:
    """Prior draws of a constant regression function theta ~ N(0, prior_sd^2)"""
    def sample(rng: np.random.Generator, size: int) -> np.ndarray:
        return prior_sd * rng.standard_normal((size, 1))
    return sample


def gaussian_location_mass(eps: float, sigma: float = 1.0, prior_sd: float = 1.0,
                           truth: float = 0.0) -> float:
    """Closed-form prior mass of {|theta - truth| <= sigma eps}"""
    dist = stats.norm(0.0, prior_sd)
    return float(dist.cdf(truth + sigma * eps) - dist.cdf(truth - sigma * eps))


class Identifiability:
    """Gap, KL-ball and complexity computations"""

    def __init__(self):
        self.truncation = DELTA_TRUNCATION
        self.min_draws = COMPLEXITY_MIN_DRAWS
        self.radius_tol = CRITICAL_RADIUS_TOL
        self.radius_floor = CRITICAL_RADIUS_FLOOR

    # ---- identifiability gap ----

    @staticmethod
    def _cosine_design(trunc: int, nodes: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """Weighted basis matrix B[k, q] = w_q e_k(x_q)"""
        k = np.arange(trunc + 1)[:, None]
        basis = np.where(k == 0, 1.0, math.sqrt(2.0) * np.cos(k * math.pi * nodes[None, :]))
        return basis * weights[None, :]

    def _coefficients(self, truth: TruthSpec, trunc: int, order: int) -> Tuple[np.ndarray, float]:
        d = len(truth.support)
        x, w = np.polynomial.legendre.leggauss(order)
        nodes, weights = 0.5 * (x + 1.0), 0.5 * w
        grids = np.meshgrid(*([nodes] * d), indexing="ij")
        points = np.full((nodes.size ** d, truth.p), 0.5)
        for axis, j in enumerate(truth.support):
            points[:, j - 1] = grids[axis].reshape(-1)
        values = truth(points).reshape((order,) * d)

        total = values ** 2
        design = self._cosine_design(trunc, nodes, weights)
        coef = values
        for _ in range(d):
            # the contracted axis comes out first; rotate it behind the remaining grid axes
            coef = np.moveaxis(np.tensordot(design, coef, axes=([1], [0])), 0, -1)
            total = np.tensordot(weights, total, axes=([0], [0]))
        return coef, float(total)

    def delta_basis(self, truth: TruthSpec, trunc: Optional[int] = None) -> GapEstimate:
        """Squared gap as the smallest basis mass that involves each active coordinate"""
        trunc = self.truncation if trunc is None else trunc
        if trunc < 1:
            raise ArgumentError("truncation must be at least 1")
        if not truth.support:
            return GapEstimate(0.0, {}, 0.0, 0.0, "basis")

        order = 2 * trunc + 16
        coef, energy = self._coefficients(truth, trunc, order)
        check, _ = self._coefficients(truth, trunc, order + trunc // 2 + 8)
        sq = coef ** 2
        if np.max(np.abs(sq - check ** 2)) > 1e-8 * max(1.0, energy):
            raise QuadratureError(f"cosine coefficients of {truth.name} did not converge at order {order}")

        per = {}
        for axis, j in enumerate(truth.support):
            zero_slice = np.take(sq, 0, axis=axis)
            per[j] = float(sq.sum() - zero_slice.sum())
        tail = max(energy - float(sq.sum()), 0.0)
        gap = min(per.values())
        logger.info(f"Basis gap for {truth.name}: delta^2={gap:.6g} (tail {tail:.3g}, trunc {trunc})")
        return GapEstimate(gap, per, 0.0, tail, "basis")

    def delta_mc(self, truth: TruthSpec, n_outer: int = 1000, n_inner: int = 1000,
                 seed: int = 0) -> GapEstimate:
        """Squared gap as min_j E[Var(f | X_{I* without j})] by nested Monte Carlo"""
        if n_outer < 100 or n_inner < 100:
            raise ArgumentError("delta_mc needs at least 100 outer and inner draws")
        if not truth.support:
            return GapEstimate(0.0, {}, 0.0, 0.0, "monte-carlo")

        rng = np.random.default_rng(seed)
        per: Dict[int, float] = {}
        ses: Dict[int, float] = {}
        for j in truth.support:
            outer = rng.uniform(size=(n_outer, truth.p))
            inner = rng.uniform(size=(n_outer, n_inner))
            points = np.repeat(outer, n_inner, axis=0)
            points[:, j - 1] = inner.reshape(-1)
            values = truth(points).reshape(n_outer, n_inner)
            variances = values.var(axis=1, ddof=1)
            per[j] = float(variances.mean())
            ses[j] = float(variances.std(ddof=1) / math.sqrt(n_outer))

        j_min = min(per, key=per.get)
        return GapEstimate(per[j_min], per, ses[j_min], 0.0, "monte-carlo")

    # ---- KL neighbourhood ----

    @staticmethod
    def ball_radius_sq(values: np.ndarray, truth_values: np.ndarray, sigma: float) -> np.ndarray:
        """max(D, V) / n for Gaussian regression, per row of values"""
        values = np.asarray(values, dtype=float)
        truth_values = np.asarray(truth_values, dtype=float).reshape(-1)
        if values.shape[-1] != truth_values.shape[0]:
            raise ArgumentError(f"{values.shape[-1]} values against {truth_values.shape[0]} truth values")
        if not sigma > 0:
            raise ArgumentError("sigma must be positive")
        mean_sq = np.mean((values - truth_values) ** 2, axis=-1)
        # V = 2 D for equal-variance Gaussians
        return mean_sq / sigma ** 2

    def kl_ball_member(self, theta_vals: Sequence[float], theta_star_vals: Sequence[float],
                       sigma: float, n: int, eps: float) -> bool:
        """Whether D <= n eps^2 and V <= n eps^2 at the design points (closed ball)"""
        theta_vals = np.asarray(theta_vals, dtype=float)
        theta_star_vals = np.asarray(theta_star_vals, dtype=float)
        if theta_vals.shape != theta_star_vals.shape:
            raise ArgumentError("theta and truth must be evaluated on the same design points")
        gap_sq = n * float(np.mean((theta_vals - theta_star_vals) ** 2))
        kl = gap_sq / (2.0 * sigma ** 2)
        variance = gap_sq / sigma ** 2
        bound = n * eps ** 2
        return kl <= bound and variance <= bound

    # ---- local complexity ----

    def _estimate(self, radius_sq: np.ndarray, eps: float, n: int) -> ComplexityEstimate:
        n_mc = radius_sq.shape[0]
        hits = int(np.count_nonzero(radius_sq <= eps ** 2))
        mass = hits / n_mc
        censored = hits == 0
        complexity = -math.log(max(mass, 1.0 / n_mc)) / n
        ci = stats.binomtest(hits, n_mc).proportion_ci(0.95, method="exact")
        return ComplexityEstimate(
            epsilon=eps, n=n, mass=mass, complexity=complexity, n_mc=n_mc, hits=hits,
            se=math.sqrt(mass * (1.0 - mass) / n_mc), ci_low=float(ci.low),
            ci_high=float(ci.high), censored=censored,
        )

    def _draw_radii(self, prior_sampler: PriorSampler, truth_values: np.ndarray,
                    n_mc: int, seed: int, sigma: float) -> np.ndarray:
        if n_mc < self.min_draws:
            raise ArgumentError(f"local complexity needs at least {self.min_draws} prior draws")
        draws = np.asarray(prior_sampler(np.random.default_rng(seed), n_mc), dtype=float)
        return self.ball_radius_sq(draws.reshape(n_mc, -1), truth_values, sigma)

    def local_complexity(self, prior_sampler: PriorSampler, truth_values: Sequence[float],
                         eps: float, n: int, n_mc: int = COMPLEXITY_MIN_DRAWS, seed: int = 0,
                         sigma: float = 1.0) -> ComplexityEstimate:
        """-(1/n) log of the prior mass of the eps KL ball, floored at 1/n_mc"""
        radius_sq = self._draw_radii(prior_sampler, np.asarray(truth_values), n_mc, seed, sigma)
        estimate = self._estimate(radius_sq, eps, n)
        if estimate.censored:
            run_logger.log_estimator_flag("local complexity", "no prior draw inside the ball",
                                          epsilon=eps, n=n, n_mc=n_mc)
        return estimate

    def complexity_profile(self, prior_sampler: PriorSampler, truth_values: Sequence[float],
                           eps_grid: Sequence[float], n: int, n_mc: int = COMPLEXITY_MIN_DRAWS,
                           seed: int = 0, sigma: float = 1.0) -> List[ComplexityEstimate]:
        """Estimates over an eps grid from one shared set of prior draws"""
        radius_sq = self._draw_radii(prior_sampler, np.asarray(truth_values), n_mc, seed, sigma)
        out = [self._estimate(radius_sq, float(eps), n) for eps in eps_grid]
        censored = [e.epsilon for e in out if e.censored]
        if censored:
            run_logger.log_estimator_flag("local complexity", "censored at the smallest radii",
                                          epsilons=censored, n=n, n_mc=n_mc)
        return out

    def critical_radius(self, prior_sampler: PriorSampler, truth_values: Sequence[float],
                        alpha: float, n: int, seed: int = 0, n_mc: int = 10_000,
                        sigma: float = 1.0, start: float = 0.1) -> float:
        """Smallest eps with complexity(eps) <= alpha eps^2, by bracketing and bisection"""
        if not 0 < alpha < 1:
            raise ArgumentError(f"alpha must lie strictly inside (0, 1), got {alpha}")
        radius_sq = self._draw_radii(prior_sampler, np.asarray(truth_values), n_mc, seed, sigma)

        def gap(eps: float) -> float:
            return self._estimate(radius_sq, eps, n).complexity - alpha * eps ** 2

        hi = start
        for _ in range(60):
            if gap(hi) <= 0:
                break
            hi *= 2.0
        else:
            raise BracketError(f"complexity stays above alpha eps^2 up to eps={hi:.4g}")

        lo = hi
        while gap(lo) <= 0:
            if lo <= self.radius_floor:
                return self.radius_floor
            lo = max(lo / 2.0, self.radius_floor)
        if gap(hi) > 0 or gap(lo) <= 0:
            raise BracketError(f"no sign change between eps={lo:.4g} and eps={hi:.4g}")

        while hi - lo > self.radius_tol:
            mid = 0.5 * (lo + hi)
            if gap(mid) > 0:
                lo = mid
            else:
                hi = mid
        logger.info(f"Critical radius at n={n}, alpha={alpha}: {hi:.4g}")
        return hi

    # ---- projections ----

    def projection_error(self, X: np.ndarray, truth_values: np.ndarray, subset: Sequence[int],
                         trunc: int = 8) -> float:
        """Empirical L2 distance from f* to its least-squares tensor-cosine fit on a subset"""
        X = np.asarray(X, dtype=float)
        truth_values = np.asarray(truth_values, dtype=float)
        columns = [np.ones(X.shape[0])]
        if subset:
            k = np.arange(trunc + 1)
            per_axis = []
            for j in subset:
                x = X[:, j - 1][:, None]
                per_axis.append(np.where(k == 0, 1.0, math.sqrt(2.0) * np.cos(k * math.pi * x)))
            design = per_axis[0]
            for block in per_axis[1:]:
                design = (design[:, :, None] * block[:, None, :]).reshape(X.shape[0], -1)
            columns = [design]
        design = np.column_stack(columns)
        coef, *_ = np.linalg.lstsq(design, truth_values, rcond=None)
        resid = truth_values - design @ coef
        return float(math.sqrt(np.mean(resid ** 2)))


# Global identifiability instance
identifiability = Identifiability()
