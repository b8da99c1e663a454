"""
Density regression with covariate-gated mixtures of normals
Conditional densities, the deterministic (epsilon, sigma, m) schedule, the
restricted mixture prior, a Metropolis-within-Gibbs posterior sampler and
model posteriors from tempered sequential Monte Carlo or prior importance
sampling
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, stats
from scipy.special import gammaln, logsumexp

from config import (
    DIRICHLET_REJECTION_BUDGET, DRVS_CHUNK_SIZE, DRVS_DEFAULTS, DRVS_EVIDENCE_DRAWS,
    DRVS_EVIDENCE_METHOD, DRVS_MCMC_ITERATIONS, DRVS_MIN_ESS, DRVS_PROPOSAL_SCALES,
    DRVS_SMC_ESS_FRACTION, DRVS_SMC_MAX_STEPS, DRVS_SMC_MOVES, DRVS_SMC_PARTICLES, DRVS_THIN,
    MCMC_BURN_IN_FRACTION, SCHEDULE_T_OFFSET,
)
from fracbayes.exceptions import ArgumentError, ConfigError, RetryBudgetError, ScheduleError
from fracbayes.gp_model import RegressionData
from fracbayes.model_space import ModelIndex, ModelPosterior, ModelSpace, model_space
from fracbayes.run_logger import run_logger
from fracbayes.utils import batch_means_se, derive_seed, effective_sample_size, log_mean_exp

logger = logging.getLogger(__name__)

PRIOR_IMPORTANCE = "prior-importance"
TEMPERED_SMC = "tempered-smc"
EVIDENCE_METHODS = (TEMPERED_SMC, PRIOR_IMPORTANCE)

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class DrvsHyper:
    """Prior hyperparameters plus optional overrides of the scheduled m and sigma"""

    a: float = DRVS_DEFAULTS["a"]
    b: float = DRVS_DEFAULTS["b"]
    a2: float = DRVS_DEFAULTS["a2"]
    tau: float = DRVS_DEFAULTS["tau"]
    tau1: float = DRVS_DEFAULTS["tau1"]
    tau2: float = DRVS_DEFAULTS["tau2"]
    beta: float = DRVS_DEFAULTS["beta"]
    m: Optional[int] = None
    sigma: Optional[float] = None

    def __post_init__(self):
        for name in ("a", "a2", "tau", "tau1", "tau2", "beta"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"drvs.{name} must be positive, got {getattr(self, name)}")
        if not self.b > 1:
            raise ConfigError(f"drvs.b must exceed 1, got {self.b}")
        if self.m is not None and self.m < 1:
            raise ConfigError("drvs.m must be at least 1")
        if self.sigma is not None and not self.sigma > 0:
            raise ConfigError("drvs.sigma must be positive")

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "DrvsHyper":
        data = dict(data or {})
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown drvs keys: {sorted(unknown)}")
        if data.get("m") is not None:
            data["m"] = int(data["m"])
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def weight_floor(self, m: int) -> float:
        """Lower bound 1/(b m) on every mixture weight"""
        return 1.0 / (self.b * m)

    def mu_y_prior(self):
        """Generalised normal with density proportional to exp(-a2 |mu|^tau1)"""
        return stats.gennorm(beta=self.tau1, scale=self.a2 ** (-1.0 / self.tau1))

    def log_mu_y_normaliser(self) -> float:
        """log of tau1 a2^(1/tau1) / (2 Gamma(1/tau1))"""
        return (math.log(self.tau1) + math.log(self.a2) / self.tau1
                - math.log(2.0) - float(gammaln(1.0 / self.tau1)))


@dataclass
class MixtureParams:
    """Weights, response locations, covariate locations and a common bandwidth"""

    weights: np.ndarray
    mu_y: np.ndarray
    mu_x: np.ndarray
    sigma: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.mu_y = np.asarray(self.mu_y, dtype=float).reshape(-1)
        m = self.weights.shape[0]
        mu_x = np.asarray(self.mu_x, dtype=float)
        self.mu_x = mu_x.reshape(m, -1) if mu_x.size else np.empty((m, 0))
        if m < 1 or self.mu_y.shape[0] != m:
            raise ArgumentError("weights and mu_y need the same positive length")
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights < 0):
            raise ArgumentError("mixture weights must lie on the simplex")
        if self.mu_x.size and (self.mu_x.min() < 0.0 or self.mu_x.max() > 1.0):
            raise ArgumentError("covariate locations must lie in the unit cube")
        if not self.sigma > 0:
            raise ArgumentError("sigma must be positive")

    @property
    def m(self) -> int:
        return int(self.weights.shape[0])

    @property
    def d(self) -> int:
        return int(self.mu_x.shape[1])

    def copy(self) -> "MixtureParams":
        return MixtureParams(self.weights.copy(), self.mu_y.copy(), self.mu_x.copy(), self.sigma)


@dataclass(frozen=True)
class DrvsSchedule:
    """Contraction rate, bandwidth and component count for one (n, |I|)"""

    epsilon: float
    sigma: float
    m: int
    n: int
    d: int
    t: float
    beta: float
    tau: float
    tau1: float
    tau2: float
    p: int = 0
    d0: int = 0


@dataclass
class MixtureChain:
    """Post burn-in thinned draws of the posterior sampler"""

    draws: List[MixtureParams]
    acceptance: Dict[str, float]
    log_target: np.ndarray
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def rows(self) -> List[List[Any]]:
        """draw, component, weight, mu_y, sigma, mu_x coordinates"""
        out = []
        for k, draw in enumerate(self.draws):
            for j in range(draw.m):
                out.append([k, j + 1, draw.weights[j], draw.mu_y[j], draw.sigma, *draw.mu_x[j]])
        return out


class DensityRegression:
    """Mixture density regression per covariate subset"""

    def __init__(self, space: Optional[ModelSpace] = None):
        self.space = space or model_space
        self.evidence_method = DRVS_EVIDENCE_METHOD
        self.evidence_draws = DRVS_EVIDENCE_DRAWS
        self.particles = DRVS_SMC_PARTICLES
        self.ess_fraction = DRVS_SMC_ESS_FRACTION
        self.smc_moves = DRVS_SMC_MOVES
        self.max_tempering_steps = DRVS_SMC_MAX_STEPS
        self.chunk_size = DRVS_CHUNK_SIZE
        self.min_ess = DRVS_MIN_ESS
        self.rejection_budget = DIRICHLET_REJECTION_BUDGET
        self.proposal_scales = dict(DRVS_PROPOSAL_SCALES)
        self.burn_in_fraction = MCMC_BURN_IN_FRACTION

    # ---- conditional density ----

    @staticmethod
    def gate_weights(x: np.ndarray, log_weights: np.ndarray, mu_x: np.ndarray,
                     sigma: float) -> np.ndarray:
        """Normalised log gates, softmax over components of log w_j - |x - mu_j|^2 / 2 sigma^2.

        x has shape (n, d), log_weights (N, m) and mu_x (N, m, d); the result
        has shape (N, n, m). Log weights need not be normalised.
        """
        x = np.asarray(x, dtype=float)
        sq = np.sum((x[None, :, None, :] - mu_x[:, None, :, :]) ** 2, axis=-1)
        logits = log_weights[:, None, :] - sq / (2.0 * sigma ** 2)
        return logits - logsumexp(logits, axis=-1, keepdims=True)

    def _log_density_batch(self, y: np.ndarray, x: np.ndarray, weights: np.ndarray,
                           mu_y: np.ndarray, mu_x: np.ndarray, sigma: float) -> np.ndarray:
        with np.errstate(divide="ignore"):
            log_w = np.log(weights)
        gates = self.gate_weights(x, log_w, mu_x, sigma)
        resid = (y[None, :, None] - mu_y[:, None, :]) / sigma
        log_phi = -0.5 * resid ** 2 - LOG_SQRT_2PI - math.log(sigma)
        return logsumexp(gates + log_phi, axis=-1)

    def log_conditional_density(self, y: float, x: Sequence[float], params: MixtureParams) -> float:
        x = np.asarray(x, dtype=float).reshape(1, -1)
        if x.shape[1] != params.d:
            raise ArgumentError(f"x has {x.shape[1]} coordinates, the mixture has {params.d}")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ArgumentError("x must lie in the unit cube")
        value = self._log_density_batch(np.array([float(y)]), x, params.weights[None],
                                        params.mu_y[None], params.mu_x[None], params.sigma)
        return float(value[0, 0])

    def conditional_density(self, y: float, x: Sequence[float], params: MixtureParams) -> float:
        """p(y | x, theta, m)"""
        return math.exp(self.log_conditional_density(y, x, params))

    def log_likelihood(self, data: RegressionData, subset: Sequence[int],
                       weights: np.ndarray, mu_y: np.ndarray, mu_x: np.ndarray,
                       sigma: float, alpha: float = 1.0) -> np.ndarray:
        """alpha times the log-likelihood of the data for each of N parameter draws"""
        if not 0 < alpha <= 1:
            raise ArgumentError(f"alpha must lie in (0, 1], got {alpha}")
        weights = np.atleast_2d(weights)
        if data.n == 0:
            return np.zeros(weights.shape[0])
        x = data.columns(subset)
        total = self._log_density_batch(data.y, x, weights, np.atleast_2d(mu_y),
                                        np.reshape(mu_x, (weights.shape[0], weights.shape[1], len(subset))),
                                        sigma).sum(axis=1)
        return total if alpha == 1.0 else alpha * total

    # ---- schedule ----

    @staticmethod
    def schedule_exponent(d: int, beta: float, tau: float, tau1: float, tau2: float) -> float:
        """t = t0 + max(0, (1 - tau1)/2) plus a fixed offset"""
        s = 1.0 + 1.0 / beta + 1.0 / tau
        t0 = ((d + 1) * s + max(tau1, 1.0, tau2 / tau)) / (2.0 + (d + 1) / beta)
        return t0 + max(0.0, (1.0 - tau1) / 2.0) + SCHEDULE_T_OFFSET

    @staticmethod
    def epsilon_rate(n: float, beta: float, d: int, t: float) -> float:
        """n^(-beta / (2 beta + d + 1)) (log n)^t"""
        return float(n) ** (-beta / (2.0 * beta + d + 1)) * math.log(n) ** t

    def schedule(self, n: int, beta: float, d: int, tau: float = 1.0, tau1: float = 1.0,
                 tau2: float = 1.0, p: int = 0, d0: int = 0) -> DrvsSchedule:
        """Rate, sigma_n = (eps / log(1/eps))^(1/beta) and m for a model of size d"""
        if n < 2:
            raise ArgumentError("schedule needs n >= 2")
        if not beta > 0 or d < 0:
            raise ArgumentError("schedule needs beta > 0 and d >= 0")
        t = self.schedule_exponent(d, beta, tau, tau1, tau2)
        eps = self.epsilon_rate(n, beta, d, t)
        if eps >= 1.0:
            raise ScheduleError(
                f"epsilon = {eps:.4g} >= 1 at n={n}, |I|={d}; n is too small for the "
                "schedule, set drvs.m and drvs.sigma explicitly"
            )
        log_inv = math.log(1.0 / eps)
        sigma = (eps / log_inv) ** (1.0 / beta)
        m = max(1, math.ceil(sigma ** (-d) * log_inv ** (d + d / tau)))
        return DrvsSchedule(epsilon=eps, sigma=sigma, m=m, n=n, d=d, t=t, beta=beta,
                            tau=tau, tau1=tau1, tau2=tau2, p=p, d0=d0)

    def components(self, n: int, d: int, hyper: DrvsHyper) -> Tuple[int, float]:
        """(m, sigma) from the overrides when set, otherwise from the schedule"""
        if hyper.m is not None and hyper.sigma is not None:
            return hyper.m, hyper.sigma
        sched = self.schedule(max(n, 2), hyper.beta, d, hyper.tau, hyper.tau1, hyper.tau2)
        return (hyper.m if hyper.m is not None else sched.m,
                hyper.sigma if hyper.sigma is not None else sched.sigma)

    # ---- prior ----

    def _restricted_dirichlet(self, m: int, size: int, hyper: DrvsHyper,
                              rng: np.random.Generator) -> np.ndarray:
        if m == 1:
            return np.ones((size, 1))
        floor = hyper.weight_floor(m)
        accepted: List[np.ndarray] = []
        count = 0
        tried = 0
        while count < size:
            if tried >= self.rejection_budget:
                raise ConfigError(
                    f"restricted Dirichlet accepted {count} of {tried} proposals (m={m}, "
                    f"a={hyper.a:g}, floor 1/(b m)={floor:.3g}); lower b or raise a, "
                    "the restriction is only feasible for b > 1"
                )
            batch = min(max(2 * (size - count), 64), self.rejection_budget - tried)
            draws = rng.dirichlet(np.full(m, hyper.a / m), size=batch)
            tried += batch
            keep = draws[draws.min(axis=1) > floor]
            accepted.append(keep)
            count += keep.shape[0]
        if tried > 10 * size:
            run_logger.log_numerical_warning(
                "restricted dirichlet", f"acceptance {size / tried:.3g} for m={m}",
                m=m, tried=tried,
            )
        return np.concatenate(accepted)[:size]

    def _prior_batch(self, m: int, d: int, size: int, hyper: DrvsHyper,
                     rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        weights = self._restricted_dirichlet(m, size, hyper, rng)
        mu_y = hyper.mu_y_prior().rvs(size=(size, m), random_state=rng)
        mu_x = rng.uniform(size=(size, m, d))
        return weights, np.asarray(mu_y, dtype=float).reshape(size, m), mu_x

    def drvs_prior_sample(self, m: int, subset: Sequence[int], hyper: Optional[DrvsHyper] = None,
                          seed: int = 0, sigma: Optional[float] = None) -> MixtureParams:
        """One draw of theta from the restricted mixture prior"""
        hyper = hyper or DrvsHyper()
        if m < 1:
            raise ArgumentError("m must be at least 1")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        weights, mu_y, mu_x = self._prior_batch(m, len(subset), 1, hyper, rng)
        bandwidth = sigma if sigma is not None else (hyper.sigma if hyper.sigma is not None else 1.0)
        return MixtureParams(weights[0] / weights[0].sum(), mu_y[0], mu_x[0], bandwidth)

    def _log_prior_batch(self, weights: np.ndarray, mu_y: np.ndarray, mu_x: np.ndarray,
                         hyper: DrvsHyper) -> np.ndarray:
        """Prior log density of N parameter draws, -inf outside the support"""
        m = weights.shape[1]
        value = m * hyper.log_mu_y_normaliser() - hyper.a2 * np.sum(np.abs(mu_y) ** hyper.tau1, axis=1)
        if m > 1:
            conc = hyper.a / m
            with np.errstate(divide="ignore", invalid="ignore"):
                log_w = np.log(weights)
            value = value + gammaln(hyper.a) - m * gammaln(conc) + (conc - 1.0) * np.sum(log_w, axis=1)
            value = np.where(np.any(weights <= hyper.weight_floor(m), axis=1), -np.inf, value)
        if mu_x.size:
            outside = np.any((mu_x < 0.0) | (mu_x > 1.0), axis=(1, 2))
            value = np.where(outside, -np.inf, value)
        return value

    def log_prior(self, params: MixtureParams, hyper: DrvsHyper) -> float:
        """Prior log density of theta up to the normaliser of the weight restriction"""
        value = self._log_prior_batch(params.weights[None], params.mu_y[None],
                                      params.mu_x[None], hyper)
        return float(value[0])

    # ---- posterior sampler ----

    def drvs_posterior_sampler(self, data: RegressionData, subset: Sequence[int],
                               schedule: Optional[DrvsSchedule] = None,
                               hyper: Optional[DrvsHyper] = None,
                               iters: int = DRVS_MCMC_ITERATIONS, seed: int = 0,
                               alpha: float = 1.0, thin: int = DRVS_THIN) -> MixtureChain:
        """Random-walk Metropolis within Gibbs on theta for fixed m and sigma.

        Each sweep updates every mu_y, every mu_x (moves leaving the cube
        are rejected) and, for m > 1, transfers a uniform amount
        of weight between a random pair of components.
        """
        hyper = hyper or DrvsHyper()
        subset = tuple(subset)
        if iters < 1 or thin < 1:
            raise ArgumentError("iters and thin must be at least 1")
        if schedule is not None:
            m, sigma = (hyper.m or schedule.m), (hyper.sigma or schedule.sigma)
        else:
            m, sigma = self.components(data.n, len(subset), hyper)

        rng = np.random.default_rng(seed)
        state = self.drvs_prior_sample(m, subset, hyper, rng, sigma)
        scales = self.proposal_scales

        def log_target(params: MixtureParams) -> float:
            prior = self.log_prior(params, hyper)
            if not math.isfinite(prior):
                return -math.inf
            ll = self.log_likelihood(data, subset, params.weights, params.mu_y,
                                     params.mu_x[None], params.sigma, alpha)
            return prior + float(ll[0])

        current = log_target(state)
        accepted = {"mu_y": 0, "mu_x": 0, "weights": 0}
        proposed = {"mu_y": 0, "mu_x": 0, "weights": 0}
        burn_in = int(self.burn_in_fraction * iters)
        draws: List[MixtureParams] = []
        trace = []

        def attempt(block: str, candidate: MixtureParams):
            nonlocal state, current
            proposed[block] += 1
            value = log_target(candidate)
            if value > -math.inf and math.log(rng.uniform()) < value - current:
                state, current = candidate, value
                accepted[block] += 1

        for step in range(iters):
            for j in range(m):
                candidate = state.copy()
                candidate.mu_y[j] += scales["mu_y"] * sigma * rng.standard_normal()
                attempt("mu_y", candidate)
                if state.d:
                    moved = state.mu_x[j] + scales["mu_x"] * rng.standard_normal(state.d)
                    if moved.min() >= 0.0 and moved.max() <= 1.0:
                        candidate = state.copy()
                        candidate.mu_x[j] = moved
                        attempt("mu_x", candidate)
                    else:
                        proposed["mu_x"] += 1
            if m > 1:
                j, k = rng.choice(m, size=2, replace=False)
                delta = rng.uniform(-scales["weights"], scales["weights"])
                weights = state.weights.copy()
                weights[j] -= delta
                weights[k] += delta
                if weights.min() > 0:
                    candidate = state.copy()
                    candidate.weights = weights
                    attempt("weights", candidate)
                else:
                    proposed["weights"] += 1
            if step >= burn_in and (step - burn_in) % thin == 0:
                draws.append(state.copy())
                trace.append(current)

        rates = {b: accepted[b] / proposed[b] for b in proposed if proposed[b]}
        logger.info(f"DRVS chain on {subset}: m={m}, sigma={sigma:.4g}, {iters} sweeps, "
                    f"acceptance {rates}")
        if any(rate < 0.05 for rate in rates.values()):
            run_logger.log_estimator_flag("drvs posterior sampler", "low acceptance",
                                          subset=list(subset), acceptance=rates)
        return MixtureChain(
            draws=draws,
            acceptance=rates,
            log_target=np.array(trace),
            diagnostics={"iterations": iters, "burn_in": burn_in, "thin": thin,
                         "m": m, "sigma": sigma, "alpha": alpha, "seed": seed,
                         "log_target_mean": float(np.mean(trace)) if trace else math.nan,
                         "log_target_se": batch_means_se(np.array(trace)) if len(trace) > 1 else math.nan},
        )

    # ---- model posterior ----

    def _batched_log_likelihood(self, data: RegressionData, subset: Sequence[int],
                                weights: np.ndarray, mu_y: np.ndarray, mu_x: np.ndarray,
                                sigma: float, alpha: float, workers: int = 1) -> np.ndarray:
        """alpha log-likelihood of N draws, evaluated in chunks"""
        starts = range(0, weights.shape[0], self.chunk_size)

        def part(start: int) -> np.ndarray:
            rows = slice(start, start + self.chunk_size)
            return self.log_likelihood(data, subset, weights[rows], mu_y[rows], mu_x[rows], sigma, alpha)

        with np.errstate(divide="ignore", invalid="ignore"):
            if workers > 1 and len(starts) > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    parts = list(pool.map(part, starts))
            else:
                parts = [part(start) for start in starts]
        values = np.concatenate(parts)
        return np.where(np.isnan(values), -np.inf, values)

    def _prior_importance(self, data: RegressionData, subset: Tuple[int, ...], hyper: DrvsHyper,
                          alpha: float, seed: int, n_draws: int,
                          workers: int) -> Tuple[float, float, float]:
        m, sigma = self.components(data.n, len(subset), hyper)
        chunks = [(c, min(self.chunk_size, n_draws - c * self.chunk_size))
                  for c in range(math.ceil(n_draws / self.chunk_size))]

        def run_chunk(chunk: Tuple[int, int]) -> np.ndarray:
            index, size = chunk
            rng = np.random.default_rng(derive_seed(seed, index))
            weights, mu_y, mu_x = self._prior_batch(m, len(subset), size, hyper, rng)
            return self.log_likelihood(data, subset, weights, mu_y, mu_x, sigma, alpha)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(run_chunk, chunks))
        else:
            parts = [run_chunk(c) for c in chunks]
        log_w = np.concatenate(parts)

        value = log_mean_exp(log_w)
        w = np.exp(log_w - np.max(log_w))
        se = float(np.std(w, ddof=1) / (math.sqrt(w.size) * w.mean())) if w.size > 1 else 0.0
        return value, se, effective_sample_size(log_w)

    def _next_temperature(self, loglik: np.ndarray, temperature: float) -> float:
        """Largest next temperature whose incremental weights keep the target ESS"""
        target = self.ess_fraction * loglik.size

        def gap(t: float) -> float:
            if t <= temperature:
                return loglik.size - target
            return effective_sample_size((t - temperature) * loglik) - target

        if gap(1.0) >= 0:
            return 1.0
        return float(optimize.brentq(gap, temperature, 1.0, xtol=1e-12))

    @staticmethod
    def _systematic_resample(log_inc: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        probs = np.exp(log_inc - logsumexp(log_inc))
        positions = (rng.uniform() + np.arange(probs.size)) / probs.size
        return np.minimum(np.searchsorted(np.cumsum(probs), positions), probs.size - 1)

    def _tempered_smc(self, data: RegressionData, subset: Tuple[int, ...], hyper: DrvsHyper,
                      alpha: float, seed: int, particles: int,
                      workers: int) -> Tuple[float, float, float, Dict[str, Any]]:
        """Adaptive tempering from the prior to the alpha-posterior.

        Each step picks the next temperature so the incremental weights keep
        ess_fraction of the particles, resamples systematically and moves
        every particle with random-walk Metropolis blocks that leave the
        tempered posterior invariant. The evidence is the product of the
        mean incremental weights; its se adds the per-step delta-method
        variances.
        """
        m, sigma = self.components(data.n, len(subset), hyper)
        d = len(subset)
        rng = np.random.default_rng(seed)
        weights, mu_y, mu_x = self._prior_batch(m, d, particles, hyper, rng)
        weights = weights / weights.sum(axis=1, keepdims=True)

        def loglik_of(w, y, x):
            return self._batched_log_likelihood(data, subset, w, y, x, sigma, alpha, workers)

        loglik = loglik_of(weights, mu_y, mu_x)
        prior = self._log_prior_batch(weights, mu_y, mu_x, hyper)
        temperature = 0.0
        log_z = 0.0
        variance = 0.0
        min_ess = float(particles)
        temperatures = []
        rates = []

        while temperature < 1.0:
            if len(temperatures) >= self.max_tempering_steps:
                raise RetryBudgetError(
                    f"tempering stalled at {temperature:.3g} after {len(temperatures)} steps "
                    f"for subset {subset}"
                )
            following = self._next_temperature(loglik, temperature)
            with np.errstate(invalid="ignore"):
                log_inc = np.where(np.isfinite(loglik), (following - temperature) * loglik, -np.inf)
            log_z += log_mean_exp(log_inc)
            w = np.exp(log_inc - np.max(log_inc))
            variance += float(np.var(w, ddof=1) / (particles * w.mean() ** 2))
            min_ess = min(min_ess, effective_sample_size(log_inc))
            temperature = following
            temperatures.append(temperature)

            keep = self._systematic_resample(log_inc, rng)
            weights, mu_y, mu_x = weights[keep], mu_y[keep], mu_x[keep]
            loglik, prior = loglik[keep], prior[keep]

            accepted = 0
            proposed = 0
            for _ in range(self.smc_moves):
                for block in ("mu_y", "mu_x", "weights"):
                    if (block == "mu_x" and d == 0) or (block == "weights" and m == 1):
                        continue
                    cand_w, cand_y, cand_x = weights, mu_y, mu_x
                    if block == "mu_y":
                        spread = np.maximum(mu_y.std(axis=0), 1e-3 * sigma)
                        cand_y = mu_y + 2.38 / math.sqrt(m) * spread * rng.standard_normal(mu_y.shape)
                    elif block == "mu_x":
                        spread = np.maximum(mu_x.std(axis=0), 1e-3)
                        cand_x = mu_x + 2.38 / math.sqrt(m * d) * spread * rng.standard_normal(mu_x.shape)
                    else:
                        first = rng.integers(m, size=particles)
                        second = (first + rng.integers(1, m, size=particles)) % m
                        shift = rng.uniform(-1.0, 1.0, size=particles) * self.proposal_scales["weights"]
                        cand_w = weights.copy()
                        rows = np.arange(particles)
                        cand_w[rows, first] -= shift
                        cand_w[rows, second] += shift
                    cand_prior = self._log_prior_batch(cand_w, cand_y, cand_x, hyper)
                    inside = np.isfinite(cand_prior)
                    cand_loglik = np.full(particles, -np.inf)
                    if inside.any():
                        cand_loglik[inside] = loglik_of(cand_w[inside], cand_y[inside], cand_x[inside])
                    with np.errstate(invalid="ignore"):
                        log_ratio = (cand_prior + temperature * cand_loglik) - (prior + temperature * loglik)
                    move = np.log(rng.uniform(size=particles)) < np.nan_to_num(log_ratio, nan=-np.inf)
                    weights = np.where(move[:, None], cand_w, weights)
                    mu_y = np.where(move[:, None], cand_y, mu_y)
                    mu_x = np.where(move[:, None, None], cand_x, mu_x)
                    loglik = np.where(move, cand_loglik, loglik)
                    prior = np.where(move, cand_prior, prior)
                    accepted += int(move.sum())
                    proposed += particles
            rates.append(accepted / proposed if proposed else 1.0)

        info = {"steps": len(temperatures), "min_ess": min_ess,
                "acceptance": float(np.mean(rates)), "particles": particles}
        if info["acceptance"] < 0.05:
            run_logger.log_estimator_flag("drvs evidence", "low move acceptance",
                                          subset=list(subset), acceptance=info["acceptance"])
        logger.debug(f"Tempered SMC on {subset}: {info['steps']} temperatures, "
                      f"min ESS {min_ess:.1f}, acceptance {info['acceptance']:.3f}")
        return log_z, math.sqrt(variance), min_ess, info

    def log_evidence(self, data: RegressionData, subset: Sequence[int], hyper: DrvsHyper,
                     alpha: float, seed: int, n_draws: Optional[int] = None,
                     workers: int = 1, method: Optional[str] = None) -> Tuple[float, float, float]:
        """log evidence of the alpha-likelihood with its se and ESS.

        tempered-smc uses n_draws particles (default self.particles) and
        reports the smallest per-step ESS; prior-importance averages the
        likelihood over n_draws prior draws (default self.evidence_draws)
        and reports the Kish ESS of those weights.
        """
        subset = tuple(subset)
        method = method or self.evidence_method
        if method == TEMPERED_SMC:
            particles = n_draws or self.particles
            if particles < 2:
                raise ArgumentError("tempered-smc needs at least two particles")
            value, se, ess, _ = self._tempered_smc(data, subset, hyper, alpha, seed, particles, workers)
            return value, se, ess
        if method == PRIOR_IMPORTANCE:
            return self._prior_importance(data, subset, hyper, alpha, seed,
                                          n_draws or self.evidence_draws, workers)
        raise ConfigError(f"unknown evidence method {method!r}; expected one of {EVIDENCE_METHODS}")

    def drvs_model_posterior(self, data: RegressionData, p: int, d0: int,
                             hyper: Optional[DrvsHyper] = None, alpha: float = 1.0,
                             seed: int = 0, n_draws: Optional[int] = None,
                             workers: int = 1, method: Optional[str] = None) -> ModelPosterior:
        """Model posterior with a Monte Carlo evidence per model.

        Models of equal size share their seed, so evidences of
        interchangeable covariates differ only through the data.
        """
        hyper = hyper or DrvsHyper()
        method = method or self.evidence_method
        models = self.space.admissible_models(p, d0)
        prior = self.space.normalised_prior(models, p, d0)
        logger.info(f"DRVS evidences ({method}) for {len(models)} models "
                    f"(p={p}, d0={d0}, n={data.n}, alpha={alpha})")

        marginals: Dict[ModelIndex, float] = {}
        ses: Dict[ModelIndex, float] = {}
        ess_by_model: Dict[str, float] = {}
        flagged = []
        for model in models:
            value, se, ess = self.log_evidence(data, model.indices, hyper, alpha,
                                               derive_seed(seed, len(model)), n_draws, workers, method)
            marginals[model], ses[model] = value, se
            ess_by_model[str(model)] = ess
            if data.n and ess < self.min_ess:
                flagged.append(str(model))
                run_logger.log_estimator_flag("drvs evidence", "effective sample size below floor",
                                              model=str(model), ess=ess, n=data.n, alpha=alpha)

        log_ev = np.array([math.log(prior[m]) if prior[m] > 0 else -math.inf for m in models])
        log_ev = log_ev + np.array([marginals[m] for m in models])
        probs = np.exp(log_ev - logsumexp(log_ev))
        draws = n_draws or (self.particles if method == TEMPERED_SMC else self.evidence_draws)
        return ModelPosterior(
            probabilities={m: float(q) for m, q in zip(models, probs)},
            alpha=alpha,
            log_evidence={m: float(v) for m, v in zip(models, log_ev)},
            estimator=method,
            log_marginal=marginals,
            prior=prior,
            log_evidence_se=ses,
            diagnostics={"models": len(models), "ess_flags": flagged, "ess": ess_by_model,
                         "draws": draws, "seed": seed},
        )


# Global density regression instance
density_regression = DensityRegression()
