"""
Divergences between evaluable probability densities
Hellinger distance, KL divergence, the V discrepancy, Renyi divergence and
alpha-affinity, each by adaptive quadrature or by seeded Monte Carlo
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, stats

from config import (
    DENSITY_CHECK_POINTS, DENSITY_TOLERANCE, GAUSSIAN_SPAN_SIGMAS,
    QUAD_ABS_TOL, QUAD_LIMIT, QUAD_REL_TOL,
)
from fracbayes.exceptions import (
    ArgumentError, ConfigError, InvalidDensityError, QuadratureError,
)

logger = logging.getLogger(__name__)

QUADRATURE = "quadrature"
MONTE_CARLO = "monte-carlo"

Sampler = Callable[[np.random.Generator, int], np.ndarray]


@dataclass(frozen=True)
class Density:
    """A density on an interval or a box with an optional sampler.

    Points are arrays of shape (k,) in one dimension and (k, d) otherwise.
    """

    name: str
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    evaluator: Callable[[np.ndarray], np.ndarray]
    log_evaluator: Optional[Callable[[np.ndarray], np.ndarray]] = None
    sampler: Optional[Sampler] = None
    breakpoints: Tuple[Tuple[float, ...], ...] = ()

    @property
    def dim(self) -> int:
        return len(self.lower)

    def density(self, x: np.ndarray) -> np.ndarray:
        values = np.asarray(self.evaluator(np.asarray(x, dtype=float)), dtype=float)
        if np.any(values < 0) or np.any(np.isnan(values)):
            raise InvalidDensityError(f"density {self.name} evaluates to a negative or NaN value")
        return values

    def log_density(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.log_evaluator is not None:
            values = np.asarray(self.log_evaluator(x), dtype=float)
            if np.any(np.isnan(values)):
                raise InvalidDensityError(f"log density {self.name} evaluates to NaN")
            return values
        with np.errstate(divide="ignore"):
            return np.log(self.density(x))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.sampler is None:
            raise ArgumentError(f"density {self.name} has no sampler; use the quadrature estimator")
        return np.asarray(self.sampler(rng, n), dtype=float)


@dataclass(frozen=True)
class DivergenceValue:
    """A divergence estimate; infinite values are tagged, never large floats"""

    value: float
    estimator: str = QUADRATURE
    se: float = 0.0
    infinite: bool = False
    diagnostic: str = ""

    def __post_init__(self):
        if self.infinite:
            object.__setattr__(self, "value", math.inf)
        elif not self.value >= 0:
            raise ArgumentError(f"divergence value must be nonnegative, got {self.value}")
        if not self.se >= 0:
            raise ArgumentError(f"standard error must be nonnegative, got {self.se}")

    @classmethod
    def infinity(cls, estimator: str, diagnostic: str) -> "DivergenceValue":
        return cls(math.inf, estimator, 0.0, True, diagnostic)


@dataclass
class IdentityReport:
    """Monte Carlo check of E[(p_theta / p_star)^alpha] against its closed form"""

    mean: float
    se: float
    theory: float
    passed: bool
    degenerate: bool = False
    n_mc: int = 0
    notes: List[str] = field(default_factory=list)


# =============================================================================
# Built-in density families
# =============================================================================


def _scalar_family(name: str, frozen, lower: float, upper: float,
                   breakpoints: Sequence[float] = ()) -> Density:
    return Density(
        name=name,
        lower=(float(lower),),
        upper=(float(upper),),
        evaluator=frozen.pdf,
        log_evaluator=frozen.logpdf,
        sampler=lambda rng, n: frozen.rvs(size=n, random_state=rng),
        breakpoints=(tuple(float(b) for b in breakpoints),),
    )


def normal(mu: float = 0.0, sd: float = 1.0) -> Density:
    if sd <= 0:
        raise ArgumentError("normal sd must be positive")
    span = GAUSSIAN_SPAN_SIGMAS * sd
    return _scalar_family(f"Normal({mu},{sd})", stats.norm(mu, sd), mu - span, mu + span, (mu,))


def uniform(lower: float = 0.0, upper: float = 1.0) -> Density:
    if upper <= lower:
        raise ArgumentError("uniform needs lower < upper")
    return _scalar_family(f"Uniform[{lower},{upper}]", stats.uniform(lower, upper - lower),
                          lower, upper)


def laplace(mu: float = 0.0, scale: float = 1.0) -> Density:
    if scale <= 0:
        raise ArgumentError("laplace scale must be positive")
    span = 40.0 * scale
    return _scalar_family(f"Laplace({mu},{scale})", stats.laplace(mu, scale),
                          mu - span, mu + span, (mu,))


def from_scipy(frozen, name: Optional[str] = None, tail: float = 1e-14) -> Density:
    """Wrap a frozen scipy.stats continuous distribution"""
    lower, upper = frozen.support()
    if not np.isfinite(lower):
        lower = frozen.ppf(tail)
    if not np.isfinite(upper):
        upper = frozen.ppf(1.0 - tail)
    label = name or f"{frozen.dist.name}{tuple(frozen.args)}"
    return _scalar_family(label, frozen, lower, upper, (float(frozen.median()),))


def product(*components: Density) -> Density:
    """Product density of one-dimensional components on their box"""
    if not components or any(c.dim != 1 for c in components):
        raise ArgumentError("product needs one or more one-dimensional components")

    def evaluator(x):
        x = np.atleast_2d(x)
        return np.prod([c.density(x[:, i]) for i, c in enumerate(components)], axis=0)

    def log_evaluator(x):
        x = np.atleast_2d(x)
        return np.sum([c.log_density(x[:, i]) for i, c in enumerate(components)], axis=0)

    sampler = None
    if all(c.sampler is not None for c in components):
        def sampler(rng, n):
            return np.column_stack([c.sample(rng, n) for c in components])

    return Density(
        name=" x ".join(c.name for c in components),
        lower=tuple(c.lower[0] for c in components),
        upper=tuple(c.upper[0] for c in components),
        evaluator=evaluator,
        log_evaluator=log_evaluator,
        sampler=sampler,
        breakpoints=tuple(c.breakpoints[0] if c.breakpoints else () for c in components),
    )


def density_from_spec(spec: Dict[str, Any]) -> Density:
    """Build a density from its JSON description"""
    spec = dict(spec)
    family = str(spec.pop("family", "")).lower()
    allowed = {
        "normal": {"mu", "sd"},
        "uniform": {"lower", "upper"},
        "laplace": {"mu", "scale"},
        "scipy": {"name", "args", "kwargs"},
        "product": {"components"},
    }
    if family not in allowed:
        raise ConfigError(f"unknown density family '{family}'")
    unknown = set(spec) - allowed[family]
    if unknown:
        raise ConfigError(f"unknown keys for {family} density: {sorted(unknown)}")

    try:
        if family == "normal":
            return normal(float(spec.get("mu", 0.0)), float(spec.get("sd", 1.0)))
        if family == "uniform":
            return uniform(float(spec.get("lower", 0.0)), float(spec.get("upper", 1.0)))
        if family == "laplace":
            return laplace(float(spec.get("mu", 0.0)), float(spec.get("scale", 1.0)))
        if family == "scipy":
            dist = getattr(stats, spec["name"])
            return from_scipy(dist(*spec.get("args", []), **spec.get("kwargs", {})))
        return product(*(density_from_spec(c) for c in spec["components"]))
    except (KeyError, AttributeError, TypeError) as e:
        raise ConfigError(f"invalid {family} density description: {e}") from e


# =============================================================================
# Divergence computations
# =============================================================================


class DivergenceLab:
    """Computes divergences between densities by quadrature or Monte Carlo"""

    def __init__(self):
        self.abs_tol = QUAD_ABS_TOL
        self.rel_tol = QUAD_REL_TOL
        self.limit = QUAD_LIMIT
        self.check_points = DENSITY_CHECK_POINTS
        self.tolerance = DENSITY_TOLERANCE

    # ---- integration helpers ----

    @staticmethod
    def _check_pair(p: Density, q: Density):
        if p.dim != q.dim:
            raise ArgumentError(f"densities live in different dimensions ({p.dim} vs {q.dim})")

    @staticmethod
    def _hull(p: Density, q: Density) -> List[Tuple[float, float]]:
        return [(min(p.lower[i], q.lower[i]), max(p.upper[i], q.upper[i])) for i in range(p.dim)]

    @staticmethod
    def _disjoint(p: Density, q: Density) -> bool:
        return any(p.upper[i] <= q.lower[i] or q.upper[i] <= p.lower[i] for i in range(p.dim))

    @staticmethod
    def _breakpoints(p: Density, q: Density, i: int, lo: float, hi: float) -> List[float]:
        candidates = {p.lower[i], p.upper[i], q.lower[i], q.upper[i]}
        for d in (p, q):
            if d.breakpoints and i < len(d.breakpoints):
                candidates.update(d.breakpoints[i])
        return sorted(c for c in candidates if lo < c < hi)

    def _integrate(self, integrand: Callable[[np.ndarray, np.ndarray], np.ndarray],
                   p: Density, q: Density,
                   region: Optional[List[Tuple[float, float]]] = None) -> float:
        """Integrate integrand(log p, log q) over the hull of both supports"""
        region = region or self._hull(p, q)

        if p.dim == 1:
            lo, hi = region[0]

            def scalar(x):
                point = np.array([x])
                return float(integrand(p.log_density(point), q.log_density(point))[0])

            value, abserr = integrate.quad(
                scalar, lo, hi, epsabs=self.abs_tol, epsrel=self.rel_tol,
                limit=self.limit, points=self._breakpoints(p, q, 0, lo, hi) or None,
            )
        else:
            def scalar(*xs):
                point = np.array([xs])
                return float(integrand(p.log_density(point), q.log_density(point))[0])

            opts = [
                {"epsabs": self.abs_tol, "epsrel": self.rel_tol, "limit": self.limit,
                 "points": self._breakpoints(p, q, i, lo, hi) or None}
                for i, (lo, hi) in enumerate(region)
            ]
            # nquad integrates its first argument innermost
            value, abserr = integrate.nquad(scalar, region, opts=opts)

        if np.isfinite(value) and abserr > max(1e3 * self.abs_tol, 1e-6 * abs(value)):
            raise QuadratureError(
                f"quadrature error estimate {abserr:.3g} exceeds tolerance on {region}"
            )
        return float(value)

    def _check_grid(self, d: Density) -> np.ndarray:
        per_axis = max(5, int(round(self.check_points ** (1.0 / d.dim))))
        axes = [np.linspace(d.lower[i], d.upper[i], per_axis) for i in range(d.dim)]
        if d.dim == 1:
            return axes[0]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])

    def _support_violation(self, p: Density, q: Density) -> Optional[str]:
        """Diagnostic when q vanishes where p carries mass, else None"""
        grid = self._check_grid(p)
        p_vals = p.density(grid)
        q_vals = q.density(grid)
        bad = (p_vals > self.tolerance) & (q_vals <= 0)
        if not np.any(bad):
            return None
        where = np.atleast_1d(grid[bad][0]).tolist()
        return (f"{q.name} vanishes where {p.name} > {self.tolerance:g} "
                f"({int(bad.sum())} of {bad.size} grid points, first at {where})")

    @staticmethod
    def _check_alpha(alpha: float):
        if not (isinstance(alpha, (int, float, np.floating)) and 0.0 < float(alpha) < 1.0):
            raise ArgumentError(f"alpha must lie strictly inside (0,1), got {alpha}")

    @staticmethod
    def _mc_log_ratio(p: Density, q: Density, n_mc: int, seed: int) -> np.ndarray:
        if n_mc < 2:
            raise ArgumentError("Monte Carlo estimators need n_mc >= 2")
        rng = np.random.default_rng(seed)
        x = p.sample(rng, n_mc)
        with np.errstate(invalid="ignore"):
            return p.log_density(x) - q.log_density(x)

    # ---- public operations ----

    def hellinger(self, p: Density, q: Density, estimator: str = QUADRATURE,
                  n_mc: int = 100_000, seed: int = 0) -> DivergenceValue:
        """Hellinger distance (integral of (sqrt p - sqrt q)^2)^(1/2), in [0, sqrt 2]"""
        self._check_pair(p, q)
        if self._disjoint(p, q):
            return DivergenceValue(math.sqrt(2.0), estimator, 0.0)

        if estimator == MONTE_CARLO:
            log_ratio = self._mc_log_ratio(p, q, n_mc, seed)
            terms = np.exp(-0.5 * log_ratio)
            bc = float(np.mean(terms))
            h2 = min(2.0, max(0.0, 2.0 - 2.0 * bc))
            se_h2 = 2.0 * float(np.std(terms, ddof=1)) / math.sqrt(n_mc)
            h = math.sqrt(h2)
            se = se_h2 / (2.0 * h) if h > 0 else math.sqrt(se_h2)
            return DivergenceValue(h, MONTE_CARLO, se)

        def integrand(lp, lq):
            return (np.exp(0.5 * lp) - np.exp(0.5 * lq)) ** 2

        h2 = min(2.0, max(0.0, self._integrate(integrand, p, q)))
        return DivergenceValue(math.sqrt(h2), QUADRATURE, 0.0)

    def kl(self, p: Density, q: Density, estimator: str = QUADRATURE,
           n_mc: int = 100_000, seed: int = 0) -> DivergenceValue:
        """Kullback-Leibler divergence D(p, q)"""
        self._check_pair(p, q)
        violation = self._support_violation(p, q)
        if violation:
            logger.warning(f"KL is infinite: {violation}")
            return DivergenceValue.infinity(estimator, violation)

        if estimator == MONTE_CARLO:
            log_ratio = self._mc_log_ratio(p, q, n_mc, seed)
            if not np.all(np.isfinite(log_ratio)):
                return DivergenceValue.infinity(MONTE_CARLO, "log ratio is infinite at a draw from p")
            value = max(0.0, float(np.mean(log_ratio)))
            return DivergenceValue(value, MONTE_CARLO, float(np.std(log_ratio, ddof=1) / math.sqrt(n_mc)))

        def integrand(lp, lq):
            with np.errstate(invalid="ignore"):
                out = np.exp(lp) * (lp - lq)
            return np.where(np.isneginf(lp), 0.0, out)

        value = self._integrate(integrand, p, q)
        if not np.isfinite(value):
            return DivergenceValue.infinity(QUADRATURE, "quadrature of p log(p/q) diverged")
        return DivergenceValue(max(0.0, value), QUADRATURE, 0.0)

    def v_discrepancy(self, p: Density, q: Density, estimator: str = QUADRATURE,
                      n_mc: int = 100_000, seed: int = 0) -> DivergenceValue:
        """V(p, q): the variance under p of log(p/q)"""
        self._check_pair(p, q)
        violation = self._support_violation(p, q)
        if violation:
            return DivergenceValue.infinity(estimator, violation)

        if estimator == MONTE_CARLO:
            log_ratio = self._mc_log_ratio(p, q, n_mc, seed)
            if not np.all(np.isfinite(log_ratio)):
                return DivergenceValue.infinity(MONTE_CARLO, "log ratio is infinite at a draw from p")
            centred = log_ratio - log_ratio.mean()
            value = float(np.var(log_ratio, ddof=1))
            m4 = float(np.mean(centred ** 4))
            se = math.sqrt(max(m4 - value ** 2, 0.0) / n_mc)
            return DivergenceValue(value, MONTE_CARLO, se)

        kl_value = self.kl(p, q).value

        def integrand(lp, lq):
            with np.errstate(invalid="ignore"):
                out = np.exp(lp) * (lp - lq - kl_value) ** 2
            return np.where(np.isneginf(lp), 0.0, out)

        return DivergenceValue(max(0.0, self._integrate(integrand, p, q)), QUADRATURE, 0.0)

    def affinity(self, p: Density, q: Density, alpha: float, estimator: str = QUADRATURE,
                 n_mc: int = 100_000, seed: int = 0) -> DivergenceValue:
        """alpha-affinity: integral of p^alpha q^(1-alpha), in [0, 1]"""
        self._check_alpha(alpha)
        self._check_pair(p, q)
        if self._disjoint(p, q):
            return DivergenceValue(0.0, estimator, 0.0)

        if estimator == MONTE_CARLO:
            log_ratio = self._mc_log_ratio(p, q, n_mc, seed)
            terms = np.exp(-(1.0 - alpha) * log_ratio)
            value = min(1.0, max(0.0, float(np.mean(terms))))
            return DivergenceValue(value, MONTE_CARLO, float(np.std(terms, ddof=1) / math.sqrt(n_mc)))

        def integrand(lp, lq):
            return np.exp(alpha * lp + (1.0 - alpha) * lq)

        value = self._integrate(integrand, p, q)
        return DivergenceValue(min(1.0, max(0.0, value)), QUADRATURE, 0.0)

    def renyi(self, p: Density, q: Density, alpha: float, estimator: str = QUADRATURE,
              n_mc: int = 100_000, seed: int = 0) -> DivergenceValue:
        """Renyi divergence of order alpha: log(A_alpha) / (alpha - 1)"""
        affinity = self.affinity(p, q, alpha, estimator, n_mc, seed)
        if affinity.value <= 0:
            return DivergenceValue.infinity(affinity.estimator, "alpha-affinity is zero")
        value = max(0.0, math.log(affinity.value) / (alpha - 1.0))
        se = affinity.se / (affinity.value * (1.0 - alpha))
        return DivergenceValue(value, affinity.estimator, se)

    def measure(self, name: str, p: Density, q: Density, alpha: Optional[float] = None,
                **kwargs) -> DivergenceValue:
        """Dispatch by measure name (hellinger, kl, v, renyi, affinity)"""
        name = name.lower()
        if name in ("renyi", "affinity"):
            if alpha is None:
                raise ArgumentError(f"{name} needs alpha")
            return getattr(self, name)(p, q, alpha, **kwargs)
        if name == "hellinger":
            return self.hellinger(p, q, **kwargs)
        if name == "kl":
            return self.kl(p, q, **kwargs)
        if name in ("v", "v_discrepancy"):
            return self.v_discrepancy(p, q, **kwargs)
        raise ArgumentError(f"unknown divergence measure '{name}'")

    def fractional_identity_check(self, sampler: "DensityRatioSampler", alpha: float,
                                  n_mc: int, seed: int) -> IdentityReport:
        """Compare the Monte Carlo mean of (p_theta/p_star)^alpha with exp{-(1-alpha) D_alpha}"""
        if not 0.0 < alpha <= 1.0:
            raise ArgumentError(f"alpha must lie in (0,1], got {alpha}")
        if n_mc < 2:
            raise ArgumentError("n_mc must be at least 2")

        values = sampler(np.random.default_rng(seed), n_mc, alpha)
        mean = float(np.mean(values))
        se = float(np.std(values, ddof=1) / math.sqrt(n_mc))
        theory = sampler.theory(alpha, self)

        report = IdentityReport(mean=mean, se=se, theory=theory, passed=False, n_mc=n_mc)
        if se == 0.0:
            report.degenerate = True
            report.passed = abs(mean - theory) <= 1e-9
            report.notes.append("sampler returned a constant ratio")
            logger.warning(f"Degenerate identity check for alpha={alpha}: zero variance")
        else:
            report.passed = abs(mean - theory) <= 3.0 * se
        return report


@dataclass(frozen=True)
class DensityRatioSampler:
    """Draws X ~ p_star and evaluates (p_theta / p_star)^alpha at the draws"""

    p_theta: Density
    p_star: Density

    def __call__(self, rng: np.random.Generator, n: int, alpha: float) -> np.ndarray:
        x = self.p_star.sample(rng, n)
        with np.errstate(invalid="ignore"):
            log_ratio = self.p_theta.log_density(x) - self.p_star.log_density(x)
        return np.exp(alpha * log_ratio)

    def theory(self, alpha: float, lab: DivergenceLab) -> float:
        if alpha == 1.0:
            return 1.0
        d_alpha = lab.renyi(self.p_theta, self.p_star, alpha)
        if d_alpha.infinite:
            return 0.0
        return math.exp(-(1.0 - alpha) * d_alpha.value)


# Global divergence lab instance
divergence_lab = DivergenceLab()
