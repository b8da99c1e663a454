"""
Model selection over covariate subsets
GPVS prior weights, exact and MCMC model posteriors, Bayes factors and the
prior anti-concentration estimate
"""

import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.special import comb, logsumexp

from config import (
    ANTI_CONCENTRATION_DESIGN_SIZE, ENUMERATION_BUDGET, MCMC_BURN_IN_FRACTION,
    MOVE_PROBABILITIES,
)
from fracbayes.exceptions import ArgumentError, EnumerationBudgetError
from fracbayes.gp_model import GaussianProcessModel, GpConfig, RegressionData, gp_model
from fracbayes.run_logger import run_logger
from fracbayes.utils import format_subset, parse_subset

logger = logging.getLogger(__name__)

EXACT = "exact"
MCMC = "mcmc"


@dataclass(frozen=True, order=True)
class ModelIndex:
    """A sorted set of distinct 1-based covariate indices"""

    indices: Tuple[int, ...] = ()

    def __post_init__(self):
        values = tuple(int(i) for i in self.indices)
        if len(set(values)) != len(values):
            raise ArgumentError(f"duplicate covariate indices in {values}")
        if any(i < 1 for i in values):
            raise ArgumentError(f"covariate indices are 1-based, got {values}")
        object.__setattr__(self, "indices", tuple(sorted(values)))

    @classmethod
    def of(cls, *indices: int) -> "ModelIndex":
        return cls(tuple(indices))

    @classmethod
    def parse(cls, text: str) -> "ModelIndex":
        return cls(parse_subset(text))

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, item) -> bool:
        return item in self.indices

    def __str__(self) -> str:
        return format_subset(self.indices)

    def check_range(self, p: int):
        if self.indices and self.indices[-1] > p:
            raise ArgumentError(f"model {self} uses a covariate beyond p={p}")

    def union(self, other: Iterable[int]) -> "ModelIndex":
        return ModelIndex(tuple(set(self.indices) | set(other)))


@dataclass
class ModelPosterior:
    """Posterior mass over models for one fractional order"""

    probabilities: Dict[ModelIndex, float]
    alpha: float
    log_evidence: Dict[ModelIndex, float]
    estimator: str = EXACT
    log_marginal: Dict[ModelIndex, float] = field(default_factory=dict)
    prior: Dict[ModelIndex, float] = field(default_factory=dict)
    log_evidence_se: Dict[ModelIndex, float] = field(default_factory=dict)
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def probability(self, model: ModelIndex) -> float:
        return self.probabilities.get(model, 0.0)

    def rows(self) -> List[List[Any]]:
        """subset, log evidence, prior, posterior (and se when estimated) per model"""
        out = []
        for model in sorted(set(self.probabilities) | set(self.log_evidence)):
            row = [str(model), self.log_evidence.get(model, math.nan),
                   self.prior.get(model, math.nan), self.probability(model)]
            if self.log_evidence_se:
                row.append(self.log_evidence_se.get(model, math.nan))
            out.append(row)
        return out


@dataclass
class AntiConcentrationEstimate:
    """Monte Carlo prior mass of an empirical L2 ball around the truth"""

    estimate: float
    se: float
    upper_bound: float
    hits: int
    n_mc: int


class ModelSpace:
    """GPVS model posteriors by enumeration or Metropolis-Hastings"""

    def __init__(self, model: Optional[GaussianProcessModel] = None):
        self.gp = model or gp_model
        self.budget = ENUMERATION_BUDGET
        self.burn_in_fraction = MCMC_BURN_IN_FRACTION
        self.move_probabilities = dict(MOVE_PROBABILITIES)
        self.design_size = ANTI_CONCENTRATION_DESIGN_SIZE

    # ---- prior over models ----

    @staticmethod
    def gpvs_prior_weight(model: ModelIndex, p: int, d0: int) -> float:
        """Unnormalised p^-|I| (1 - 1/p)^(p - |I|) 1(|I| <= d0)"""
        if p < 1 or d0 < 0:
            raise ArgumentError("need p >= 1 and d0 >= 0")
        size = len(model)
        if size > d0 or size > p or (model.indices and model.indices[-1] > p):
            return 0.0
        return float(p) ** (-size) * (1.0 - 1.0 / p) ** (p - size)

    def admissible_models(self, p: int, d0: int) -> List[ModelIndex]:
        """All subsets of {1..p} with at most d0 covariates, in canonical order"""
        if p < 1 or d0 < 0:
            raise ArgumentError("need p >= 1 and d0 >= 0")
        top = min(d0, p)
        count = int(sum(comb(p, k, exact=True) for k in range(top + 1)))
        if count > self.budget:
            raise EnumerationBudgetError(
                f"{count} admissible models exceed the enumeration budget {self.budget}; "
                "use the MCMC sampler instead"
            )
        models = [ModelIndex(c) for k in range(top + 1)
                  for c in itertools.combinations(range(1, p + 1), k)]
        return sorted(models)

    def normalised_prior(self, models: Sequence[ModelIndex], p: int, d0: int) -> Dict[ModelIndex, float]:
        """Prior weights normalised over the given support"""
        weights = np.array([self.gpvs_prior_weight(m, p, d0) for m in models])
        total = weights.sum()
        if total <= 0:
            run_logger.log_numerical_warning(
                "gpvs prior", f"prior weights vanish on all {len(models)} admissible models "
                f"(p={p}, d0={d0}); using a uniform prior", p=p, d0=d0,
            )
            weights = np.ones(len(models))
            total = weights.sum()
        return {m: float(w / total) for m, w in zip(models, weights)}

    # ---- evidences ----

    def log_marginal(self, data: RegressionData, model: ModelIndex,
                     cfg: Optional[GpConfig] = None, alpha: float = 1.0) -> float:
        """Parameter-prior fractional marginal of one model"""
        if not model.indices:
            return self.gp.log_fractional_marginal(data, (), 1.0, cfg, alpha)
        return self.gp.integrate_bandwidth(data, model.indices, cfg, alpha)

    def enumerate_posterior(self, data: RegressionData, p: int, d0: int,
                            cfg: Optional[GpConfig] = None, alpha: float = 1.0,
                            workers: int = 1) -> ModelPosterior:
        """Exact posterior over every admissible model"""
        models = self.admissible_models(p, d0)
        prior = self.normalised_prior(models, p, d0)
        logger.info(f"Enumerating {len(models)} models (p={p}, d0={d0}, n={data.n}, alpha={alpha})")

        evaluate = lambda m: self.log_marginal(data, m, cfg, alpha)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                marginals = list(pool.map(evaluate, models))
        else:
            marginals = [evaluate(m) for m in models]

        with np.errstate(divide="ignore"):
            log_prior = np.log(np.array([prior[m] for m in models]))
        log_ev = log_prior + np.array(marginals)
        probs = np.exp(log_ev - logsumexp(log_ev))

        return ModelPosterior(
            probabilities={m: float(q) for m, q in zip(models, probs)},
            alpha=alpha,
            log_evidence={m: float(v) for m, v in zip(models, log_ev)},
            estimator=EXACT,
            log_marginal={m: float(v) for m, v in zip(models, marginals)},
            prior=prior,
            diagnostics={"models": len(models)},
        )

    # ---- Metropolis-Hastings over subsets ----

    def move_distribution(self, size: int, p: int, d0: int) -> Dict[str, float]:
        """Move probabilities at a model of the given size, infeasible mass redirected"""
        can_add = size < min(d0, p)
        can_delete = size > 0
        can_swap = 0 < size < p
        moves = {"add": 0.0, "delete": 0.0, "swap": 0.0}
        for name, mass in self.move_probabilities.items():
            if name == "add":
                target = "add" if can_add else ("delete" if can_delete else None)
            elif name == "delete":
                target = "delete" if can_delete else ("add" if can_add else None)
            else:
                if can_swap:
                    target = "swap"
                elif size == 0:
                    target = "add" if can_add else None
                else:
                    target = "delete" if can_delete else None
            if target is not None:
                moves[target] += mass
        return moves

    def proposal_probability(self, src: ModelIndex, dst: ModelIndex, p: int, d0: int) -> float:
        """q(src -> dst) of the add/delete/swap proposal"""
        moves = self.move_distribution(len(src), p, d0)
        a, b = set(src.indices), set(dst.indices)
        k = len(a)
        if len(b) == k + 1 and a < b:
            return moves["add"] / (p - k)
        if len(b) == k - 1 and b < a:
            return moves["delete"] / k
        if len(b) == k and len(a - b) == 1 and len(b - a) == 1:
            return moves["swap"] / (k * (p - k))
        return 0.0

    def acceptance_probability(self, src: ModelIndex, dst: ModelIndex,
                               log_evidence: Mapping[ModelIndex, float], p: int, d0: int) -> float:
        """Metropolis-Hastings acceptance of a proposed move"""
        forward = self.proposal_probability(src, dst, p, d0)
        backward = self.proposal_probability(dst, src, p, d0)
        if forward == 0.0 or backward == 0.0:
            return 0.0
        log_ratio = (log_evidence[dst] - log_evidence[src]
                     + math.log(backward) - math.log(forward))
        return 1.0 if log_ratio >= 0 else math.exp(log_ratio)

    def _propose(self, current: ModelIndex, p: int, d0: int,
                 rng: np.random.Generator) -> Optional[ModelIndex]:
        moves = self.move_distribution(len(current), p, d0)
        total = sum(moves.values())
        if total <= 0:
            return None
        names = list(moves)
        move = names[int(rng.choice(len(names), p=np.array([moves[n] for n in names]) / total))]
        inside = list(current.indices)
        outside = [i for i in range(1, p + 1) if i not in current]
        if move == "add":
            return ModelIndex(tuple(inside) + (outside[int(rng.integers(len(outside)))],))
        if move == "delete":
            drop = inside[int(rng.integers(len(inside)))]
            return ModelIndex(tuple(i for i in inside if i != drop))
        drop = inside[int(rng.integers(len(inside)))]
        add = outside[int(rng.integers(len(outside)))]
        return ModelIndex(tuple(i for i in inside if i != drop) + (add,))

    def mcmc_posterior(self, data: RegressionData, p: int, d0: int,
                       cfg: Optional[GpConfig] = None, alpha: float = 1.0,
                       iters: int = 10_000, seed: int = 0) -> ModelPosterior:
        """Add/delete/swap Metropolis-Hastings chain; visit frequencies after burn-in"""
        if iters < 1:
            raise ArgumentError("iters must be at least 1")
        if p < 1 or d0 < 0:
            raise ArgumentError("need p >= 1 and d0 >= 0")

        rng = np.random.default_rng(seed)
        cache: Dict[ModelIndex, float] = {}

        def evidence(model: ModelIndex) -> float:
            if model not in cache:
                weight = self.gpvs_prior_weight(model, p, d0)
                log_w = math.log(weight) if weight > 0 else -math.inf
                cache[model] = log_w + self.log_marginal(data, model, cfg, alpha)
            return cache[model]

        current = ModelIndex()
        if self.gpvs_prior_weight(current, p, d0) == 0.0:
            # p = 1 leaves the empty model with zero weight
            current = ModelIndex.of(1) if d0 >= 1 else current
        evidence(current)

        burn_in = int(self.burn_in_fraction * iters)
        counts: Dict[ModelIndex, int] = {}
        accepted = 0
        proposed = 0

        for step in range(iters):
            candidate = self._propose(current, p, d0, rng)
            if candidate is not None:
                proposed += 1
                evidence(candidate)
                accept = self.acceptance_probability(current, candidate, cache, p, d0)
                if accept >= 1.0 or rng.uniform() < accept:
                    current = candidate
                    accepted += 1
            if step >= burn_in:
                counts[current] = counts.get(current, 0) + 1

        kept = sum(counts.values())
        probabilities = {m: c / kept for m, c in sorted(counts.items())}
        diagnostics = {
            "iterations": iters,
            "burn_in": burn_in,
            "acceptance_rate": accepted / proposed if proposed else 0.0,
            "distinct_models": len(cache),
            "visited_after_burn_in": len(counts),
            "seed": seed,
        }
        logger.info(f"MCMC over models finished: {iters} iterations, "
                    f"acceptance {diagnostics['acceptance_rate']:.3f}, {len(cache)} models evaluated")
        return ModelPosterior(
            probabilities=probabilities,
            alpha=alpha,
            log_evidence=dict(cache),
            estimator=MCMC,
            diagnostics=diagnostics,
        )

    # ---- summaries ----

    def bayes_factor(self, data: RegressionData, first: ModelIndex, second: ModelIndex,
                     cfg: Optional[GpConfig] = None, alpha: float = 1.0) -> float:
        """log BF_alpha(first; second) from parameter priors only"""
        if first == second:
            return 0.0
        return self.log_marginal(data, first, cfg, alpha) - self.log_marginal(data, second, cfg, alpha)

    @staticmethod
    def selection_probability(post: ModelPosterior, truth: ModelIndex) -> float:
        return post.probability(truth)

    @staticmethod
    def posterior_mode(post: ModelPosterior) -> ModelIndex:
        """Most probable model; ties go to the lexicographically smallest"""
        if not post.probabilities:
            raise ArgumentError("empty posterior has no mode")
        return min(post.probabilities, key=lambda m: (-post.probabilities[m], m))

    @staticmethod
    def total_variation(first: ModelPosterior, second: ModelPosterior) -> float:
        models = set(first.probabilities) | set(second.probabilities)
        return 0.5 * sum(abs(first.probability(m) - second.probability(m)) for m in models)

    # ---- anti-concentration ----

    def sample_bandwidth(self, d: int, n: int, cfg: GpConfig, rng: np.random.Generator) -> float:
        """Draw A from its truncated prior by inverse CDF of A^d"""
        lower, upper = cfg.bandwidth_range(n, d)
        prior = stats.gamma(cfg.prior_shape, scale=cfg.prior_scale)
        lo, hi = prior.cdf(lower ** d), prior.cdf(upper ** d)
        if hi <= lo:
            return lower
        return float(prior.ppf(rng.uniform(lo, hi)) ** (1.0 / d))

    def anti_concentration_estimate(self, model: ModelIndex, cfg: Optional[GpConfig],
                                    f_star: Callable[[np.ndarray], np.ndarray], radius: float,
                                    n_mc: int, seed: int, p: Optional[int] = None,
                                    n: Optional[int] = None) -> AntiConcentrationEstimate:
        """Prior mass of {f : d_n(f, f*) <= radius} with d_n the empirical L2 on a design sample.

        p defaults to the largest covariate in the model and n, which sets
        the bandwidth lower bound, to the design size.
        """
        cfg = cfg or self.gp.config
        p = p if p is not None else max(model.indices, default=1)
        n = n if n is not None else self.design_size
        if radius < 0:
            raise ArgumentError("radius must be nonnegative")
        if n_mc < 1:
            raise ArgumentError("n_mc must be at least 1")
        model.check_range(p)

        rng = np.random.default_rng(seed)
        design = rng.uniform(size=(self.design_size, p))
        truth = np.asarray(f_star(design), dtype=float)
        points = design[:, [i - 1 for i in model.indices]]

        hits = 0
        for _ in range(n_mc):
            if model.indices:
                a = self.sample_bandwidth(len(model), n, cfg, rng)
                draw = self.gp.gp_prior_sample(model.indices, a, points, cfg, rng)
            else:
                draw = np.zeros(self.design_size)
            if math.sqrt(float(np.mean((draw - truth) ** 2))) <= radius:
                hits += 1

        estimate = hits / n_mc
        se = math.sqrt(estimate * (1.0 - estimate) / n_mc)
        if hits == 0:
            upper = 1.0 - 0.05 ** (1.0 / n_mc)
        else:
            upper = float(stats.beta.ppf(0.95, hits + 1, n_mc - hits)) if hits < n_mc else 1.0
        return AntiConcentrationEstimate(estimate, se, upper, hits, n_mc)


# Global model space instance
model_space = ModelSpace()
