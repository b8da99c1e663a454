"""
Batch experiment harness for fracbayes
Generates synthetic data, runs experiment grids cell by cell and writes the artifacts
"""

import asyncio
import hashlib
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy
from scipy import optimize, stats

from config import (
    CONFIG_SCHEMA_VERSION, DEFAULT_WORKERS, EIGEN_TRUNCATION, MCMC_DEFAULT_ITERATIONS,
    OUTPUT_DIR, RATE_TEST_POINTS, RUN_LOG_FILENAME, master_seed_override,
)
from fracbayes import __version__
from fracbayes.density_regression import EVIDENCE_METHODS, TEMPERED_SMC, DrvsHyper, density_regression
from fracbayes.exceptions import ArgumentError, ConfigError, UnsupportedKernelError
from fracbayes.gp_model import GpConfig, RegressionData, gp_model
from fracbayes.identifiability import (
    TruthSpec, gaussian_location_mass, gaussian_location_sampler, identifiability,
    truth_from_spec,
)
from fracbayes.kernel_spectra import kernel_spectra, make_kernel
from fracbayes.model_space import ModelIndex, ModelPosterior, model_space
from fracbayes.run_logger import run_logger
from fracbayes.storage import ResultStorage, storage
from fracbayes.utils import derive_seed, fit_loglog_slope, format_duration, log_cell

logger = logging.getLogger(__name__)

KINDS = ("consistency", "rate", "occam", "complexity", "spectra")
FAMILIES = ("gpvs", "drvs")
ESTIMATORS = ("exact", "mcmc")

RESULT_HEADER = ["experiment", "n", "alpha", "replicate", "statistic", "value", "seed", "detail", "error"]
SUMMARY_HEADER = ["experiment", "n", "alpha", "statistic", "mean", "se", "count", "errors"]

TOP_LEVEL_KEYS = {
    "schema_version", "name", "kind", "family", "estimator", "truth", "p", "d0", "sigma",
    "n_grid", "alpha_grid", "replicates", "master_seed", "output_dir",
    "gp", "drvs", "mcmc", "complexity", "kernels",
}
TRUTH_KEYS = {"name", "support", "level", "k", "coefficients"}
MCMC_KEYS = {"iterations", "compare_exact"}
COMPLEXITY_KEYS = {"prior_sd", "sigma", "truth", "n_mc", "radius_n_mc"}
KERNEL_KEYS = {"family", "a", "nu", "grid_size", "top", "truncation"}

CellOutcome = Tuple[Dict[str, float], str]


def _check_keys(block: Dict[str, Any], allowed: set, where: str):
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _int_field(data: Dict[str, Any], key: str, default: Optional[int] = None) -> int:
    value = data.get(key, default)
    if value is None:
        raise ConfigError(f"missing required key '{key}'")
    try:
        integral = not isinstance(value, bool) and float(value).is_integer()
    except (TypeError, ValueError):
        integral = False
    if not integral:
        raise ConfigError(f"'{key}' must be an integer, got {value!r}")
    return int(value)


@dataclass(frozen=True)
class KernelJob:
    """One kernel of a spectra experiment"""

    family: str
    a: float
    nu: Optional[float] = None
    grid_size: int = 2048
    top: int = 9
    truncation: int = EIGEN_TRUNCATION

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "KernelJob":
        _check_keys(data, KERNEL_KEYS, "kernels entry")
        if "family" not in data or "a" not in data:
            raise ConfigError("kernels entries need 'family' and 'a'")
        job = cls(
            family=str(data["family"]),
            a=float(data["a"]),
            nu=None if data.get("nu") is None else float(data["nu"]),
            grid_size=_int_field(data, "grid_size", 2048),
            top=_int_field(data, "top", 9),
            truncation=_int_field(data, "truncation", EIGEN_TRUNCATION),
        )
        try:
            make_kernel(job.family, job.a, job.nu)
        except (ArgumentError, UnsupportedKernelError) as e:
            raise ConfigError(f"invalid kernels entry: {e}") from e
        if job.top < 1 or job.top > min(job.grid_size, job.truncation):
            raise ConfigError("kernels entry 'top' must lie in 1..min(grid_size, truncation)")
        return job


@dataclass(frozen=True)
class ComplexitySettings:
    """Gaussian location model used by complexity experiments"""

    prior_sd: float = 1.0
    sigma: float = 1.0
    truth: float = 0.0
    n_mc: int = 100_000
    radius_n_mc: int = 20_000

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "ComplexitySettings":
        data = dict(data or {})
        _check_keys(data, COMPLEXITY_KEYS, "complexity")
        settings = cls(
            prior_sd=float(data.get("prior_sd", 1.0)),
            sigma=float(data.get("sigma", 1.0)),
            truth=float(data.get("truth", 0.0)),
            n_mc=_int_field(data, "n_mc", 100_000),
            radius_n_mc=_int_field(data, "radius_n_mc", 20_000),
        )
        if settings.prior_sd <= 0 or settings.sigma <= 0:
            raise ConfigError("complexity prior_sd and sigma must be positive")
        return settings


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated experiment definition"""

    name: str
    kind: str
    family: str = "gpvs"
    estimator: str = "exact"
    truth: Optional[TruthSpec] = None
    p: int = 1
    d0: int = 1
    sigma: float = 0.5
    n_grid: Tuple[int, ...] = ()
    alpha_grid: Tuple[float, ...] = (1.0,)
    replicates: int = 1
    master_seed: int = 0
    output_dir: str = OUTPUT_DIR
    gp: GpConfig = field(default_factory=GpConfig)
    drvs: DrvsHyper = field(default_factory=DrvsHyper)
    evidence_draws: Optional[int] = None
    evidence_method: str = TEMPERED_SMC
    mcmc_iterations: int = MCMC_DEFAULT_ITERATIONS
    compare_exact: bool = False
    complexity: ComplexitySettings = field(default_factory=ComplexitySettings)
    kernels: Tuple[KernelJob, ...] = ()
    raw: Dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        """Validate a JSON document; FRACBAYES_SEED replaces the master seed"""
        if not isinstance(data, dict):
            raise ConfigError("experiment config must be a JSON object")
        data = dict(data)
        _check_keys(data, TOP_LEVEL_KEYS, "experiment config")

        version = data.get("schema_version")
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {CONFIG_SCHEMA_VERSION}, got {version!r}")
        name = str(data.get("name") or "")
        if not name:
            raise ConfigError("experiment config needs a name")
        kind = data.get("kind")
        if kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {KINDS}")
        family = data.get("family", "gpvs")
        if family not in FAMILIES:
            raise ConfigError(f"unknown model family {family!r}; expected one of {FAMILIES}")
        estimator = data.get("estimator", "exact")
        if estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")
        if kind == "rate" and family != "gpvs":
            raise ConfigError("rate experiments use the gpvs family")
        if family == "drvs" and estimator == "mcmc":
            raise ConfigError("drvs model posteriors are computed by enumeration only")

        override = master_seed_override()
        master_seed = override if override is not None else _int_field(data, "master_seed", 0)
        if override is not None:
            logger.info(f"FRACBAYES_SEED overrides master seed with {override}")
            data["master_seed"] = override

        n_grid = tuple(_int_field({"n": n}, "n") for n in data.get("n_grid", []))
        if kind != "spectra":
            if not n_grid:
                raise ConfigError("n_grid must not be empty")
            if any(n < 1 for n in n_grid):
                raise ConfigError("n_grid entries must be at least 1")
            if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
                raise ConfigError(f"n_grid must be strictly increasing, got {list(n_grid)}")

        alpha_grid = tuple(float(a) for a in data.get("alpha_grid", [1.0]))
        if not alpha_grid:
            raise ConfigError("alpha_grid must not be empty")
        if any(not 0.0 < a <= 1.0 for a in alpha_grid):
            raise ConfigError(f"alpha values must lie in (0,1], got {list(alpha_grid)}")

        replicates = _int_field(data, "replicates", 1)
        if replicates < 1:
            raise ConfigError("replicates must be at least 1")
        sigma = float(data.get("sigma", 0.5))
        if sigma < 0:
            raise ConfigError("sigma must be nonnegative")

        p = _int_field(data, "p", 1)
        d0 = _int_field(data, "d0", p)
        truth = None
        if kind in ("consistency", "rate", "occam"):
            block = data.get("truth")
            if not isinstance(block, dict):
                raise ConfigError(f"{kind} experiments need a truth block")
            _check_keys(block, TRUTH_KEYS, "truth")
            if p < 1 or d0 < 0:
                raise ConfigError("need p >= 1 and d0 >= 0")
            truth = truth_from_spec(block, p)
            truth.check_bounded()
            if len(truth.support) > d0:
                raise ConfigError(f"true support {truth.support} is larger than d0={d0}")

        drvs_block = dict(data.get("drvs") or {})
        evidence_draws = drvs_block.pop("evidence_draws", None)
        if evidence_draws is not None:
            evidence_draws = _int_field({"evidence_draws": evidence_draws}, "evidence_draws")
            if evidence_draws < 2:
                raise ConfigError("drvs.evidence_draws must be at least 2")
        evidence_method = drvs_block.pop("evidence_method", TEMPERED_SMC)
        if evidence_method not in EVIDENCE_METHODS:
            raise ConfigError(f"unknown drvs.evidence_method {evidence_method!r}; "
                              f"expected one of {EVIDENCE_METHODS}")

        mcmc_block = dict(data.get("mcmc") or {})
        _check_keys(mcmc_block, MCMC_KEYS, "mcmc")
        iterations = _int_field(mcmc_block, "iterations", MCMC_DEFAULT_ITERATIONS)
        if iterations < 1:
            raise ConfigError("mcmc.iterations must be at least 1")

        kernels = tuple(KernelJob.from_dict(k) for k in data.get("kernels", []))
        if kind == "spectra" and not kernels:
            raise ConfigError("spectra experiments need a non-empty kernels list")

        return cls(
            name=name,
            kind=kind,
            family=family,
            estimator=estimator,
            truth=truth,
            p=p,
            d0=d0,
            sigma=sigma,
            n_grid=n_grid,
            alpha_grid=alpha_grid,
            replicates=replicates,
            master_seed=master_seed,
            output_dir=str(data.get("output_dir", OUTPUT_DIR)),
            gp=GpConfig.from_dict(data.get("gp")),
            drvs=DrvsHyper.from_dict(drvs_block),
            evidence_draws=evidence_draws,
            evidence_method=evidence_method,
            mcmc_iterations=iterations,
            compare_exact=bool(mcmc_block.get("compare_exact", False)),
            complexity=ComplexitySettings.from_dict(data.get("complexity")),
            kernels=kernels,
            raw=data,
        )

    def digest(self) -> str:
        """sha256 of the canonical JSON of the effective document"""
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @property
    def true_model(self) -> ModelIndex:
        return ModelIndex(self.truth.support) if self.truth else ModelIndex()


@dataclass(frozen=True)
class Cell:
    """One (n, alpha, replicate) job of an experiment grid"""

    i: int
    j: int
    r: int
    n: int
    alpha: float
    seed: int

    @property
    def coordinates(self) -> Tuple[int, int, int]:
        return (self.i, self.j, self.r)


@dataclass
class ExperimentResult:
    """Long-format rows, their summary and the run fingerprint"""

    config: ExperimentConfig
    rows: List[List[Any]]
    summary: List[List[Any]]
    plots: Dict[str, List[Tuple[float, ...]]]
    fingerprint: Dict[str, Any]
    wall_time: float
    cells: int
    failed_cells: int
    events: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.failed_cells == 0

    def manifest(self) -> Dict[str, Any]:
        manifest = dict(self.fingerprint)
        manifest.update({
            "cells": self.cells,
            "failed_cells": self.failed_cells,
            "rows": len(self.rows),
            "wall_time_seconds": self.wall_time,
        })
        return manifest


def generate_regression_data(truth: TruthSpec, n: int, sigma: float, seed: int) -> RegressionData:
    """X rows iid uniform on [0,1]^p, y = f*(X) + N(0, sigma^2)"""
    if n < 1:
        raise ArgumentError("n must be at least 1")
    if sigma < 0:
        raise ArgumentError("sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, truth.p))
    y = truth(X) + sigma * rng.standard_normal(n)
    return RegressionData(X, y)


class ExperimentHarness:
    """Runs experiment grids and assembles their artifacts"""

    def __init__(self, result_storage: Optional[ResultStorage] = None):
        self.storage = result_storage or storage
        self.workers = DEFAULT_WORKERS
        self.test_points = RATE_TEST_POINTS

    # ---- grid ----

    def cells(self, cfg: ExperimentConfig) -> List[Cell]:
        if cfg.kind == "spectra":
            return [Cell(i, 0, 0, job.grid_size, math.nan, derive_seed(cfg.master_seed, i, 0, 0))
                    for i, job in enumerate(cfg.kernels)]
        return [
            Cell(i, j, r, n, alpha, derive_seed(cfg.master_seed, i, j, r))
            for i, n in enumerate(cfg.n_grid)
            for j, alpha in enumerate(cfg.alpha_grid)
            for r in range(cfg.replicates)
        ]

    def statistics(self, cfg: ExperimentConfig, cell: Cell) -> List[str]:
        """Statistic names one cell reports, error or not"""
        if cfg.kind == "consistency":
            names = ["selection_probability", "mode_is_truth", "mode_size",
                     "log_bf_superset", "log_bf_missing"]
            if cfg.family == "drvs":
                names.append("ess_flagged")
            if cfg.estimator == "mcmc" and cfg.compare_exact:
                names.append("tv_to_exact")
            return names
        if cfg.kind == "occam":
            extra = [k for k in range(1, cfg.p + 1) if k not in cfg.truth.support]
            return [f"log_bf_add_{k}" for k in extra] + ["log_bf_add_mean"]
        if cfg.kind == "rate":
            return ["l2_error", "mode_size", "map_bandwidth"]
        if cfg.kind == "complexity":
            return ["epsilon", "mass", "mass_oracle", "complexity", "n_complexity", "censored",
                    "critical_radius", "critical_radius_oracle"]
        job = cfg.kernels[cell.i]
        label = make_kernel(job.family, job.a, job.nu).label()
        names = []
        for k in range(job.top):
            names += [f"{label}/eigen_{k}", f"{label}/gram_{k}", f"{label}/rel_error_{k}"]
        return names + [f"{label}/max_rel_error", f"{label}/trace_error"]

    # ---- shared pieces ----

    def _posterior(self, cfg: ExperimentConfig, data: RegressionData, alpha: float,
                   seed: int) -> Tuple[ModelPosterior, Optional[ModelPosterior]]:
        """Model posterior of one cell, plus the exact one when MCMC is checked against it"""
        if cfg.family == "drvs":
            return density_regression.drvs_model_posterior(
                data, cfg.p, cfg.d0, cfg.drvs, alpha, seed, cfg.evidence_draws,
                method=cfg.evidence_method), None
        if cfg.estimator == "mcmc":
            post = model_space.mcmc_posterior(data, cfg.p, cfg.d0, cfg.gp, alpha,
                                              cfg.mcmc_iterations, derive_seed(seed, 1))
            exact = model_space.enumerate_posterior(data, cfg.p, cfg.d0, cfg.gp, alpha) \
                if cfg.compare_exact else None
            return post, exact
        return model_space.enumerate_posterior(data, cfg.p, cfg.d0, cfg.gp, alpha), None

    def _log_marginal(self, cfg: ExperimentConfig, data: RegressionData, model: ModelIndex,
                      alpha: float, seed: int, post: Optional[ModelPosterior] = None) -> float:
        if post is not None and model in post.log_marginal:
            return post.log_marginal[model]
        if cfg.family == "drvs":
            value, _, _ = density_regression.log_evidence(
                data, model.indices, cfg.drvs, alpha, derive_seed(seed, len(model)), cfg.evidence_draws,
                method=cfg.evidence_method)
            return value
        return model_space.log_marginal(data, model, cfg.gp, alpha)

    # ---- experiment recipes ----

    def _consistency_cell(self, cfg: ExperimentConfig, cell: Cell) -> CellOutcome:
        data = generate_regression_data(cfg.truth, cell.n, cfg.sigma, cell.seed)
        post, exact = self._posterior(cfg, data, cell.alpha, cell.seed)
        truth = cfg.true_model
        mode = model_space.posterior_mode(post)

        values = {
            "selection_probability": model_space.selection_probability(post, truth),
            "mode_is_truth": float(mode == truth),
            "mode_size": float(len(mode)),
            "log_bf_superset": math.nan,
            "log_bf_missing": math.nan,
        }
        base = self._log_marginal(cfg, data, truth, cell.alpha, cell.seed, post)
        spare = [k for k in range(1, cfg.p + 1) if k not in truth.indices]
        if spare:
            superset = truth.union([spare[0]])
            values["log_bf_superset"] = self._log_marginal(cfg, data, superset, cell.alpha,
                                                           cell.seed, post) - base
        if truth.indices:
            missing = ModelIndex(truth.indices[:-1])
            values["log_bf_missing"] = self._log_marginal(cfg, data, missing, cell.alpha,
                                                          cell.seed, post) - base
        if cfg.family == "drvs":
            values["ess_flagged"] = float(bool(post.diagnostics.get("ess_flags")))
        if exact is not None:
            values["tv_to_exact"] = model_space.total_variation(post, exact)
        return values, str(mode)

    def _occam_cell(self, cfg: ExperimentConfig, cell: Cell) -> CellOutcome:
        data = generate_regression_data(cfg.truth, cell.n, cfg.sigma, cell.seed)
        truth = cfg.true_model
        base = self._log_marginal(cfg, data, truth, cell.alpha, cell.seed)
        values = {}
        for k in range(1, cfg.p + 1):
            if k in truth.indices:
                continue
            values[f"log_bf_add_{k}"] = self._log_marginal(cfg, data, truth.union([k]),
                                                           cell.alpha, cell.seed) - base
        values["log_bf_add_mean"] = float(np.mean(list(values.values()))) if values else math.nan
        return values, ""

    def _rate_cell(self, cfg: ExperimentConfig, cell: Cell) -> CellOutcome:
        data = generate_regression_data(cfg.truth, cell.n, cfg.sigma, cell.seed)
        post, _ = self._posterior(cfg, data, cell.alpha, cell.seed)
        mode = model_space.posterior_mode(post)
        a = gp_model.map_bandwidth(data, mode.indices, cfg.gp, cell.alpha)

        test = np.random.default_rng(derive_seed(cell.seed, 0)).uniform(size=(self.test_points, cfg.p))
        prediction = gp_model.posterior_predictive_mean(data, mode.indices, a, cfg.gp, cell.alpha, test)
        error = math.sqrt(float(np.mean((prediction - cfg.truth(test)) ** 2)))
        return {"l2_error": error, "mode_size": float(len(mode)), "map_bandwidth": a}, str(mode)

    def _complexity_cell(self, cfg: ExperimentConfig, cell: Cell) -> CellOutcome:
        settings = cfg.complexity
        sampler = gaussian_location_sampler(settings.prior_sd)
        eps = math.sqrt(math.log(cell.n) / cell.n) if cell.n > 1 else 1.0
        est = identifiability.local_complexity(sampler, [settings.truth], eps, cell.n,
                                               settings.n_mc, cell.seed, settings.sigma)
        values = {
            "epsilon": eps,
            "mass": est.mass,
            "mass_oracle": gaussian_location_mass(eps, settings.sigma, settings.prior_sd, settings.truth),
            "complexity": est.complexity,
            "n_complexity": cell.n * est.complexity,
            "censored": float(est.censored),
            "critical_radius": math.nan,
            "critical_radius_oracle": math.nan,
        }
        if cell.alpha < 1.0:
            values["critical_radius"] = identifiability.critical_radius(
                sampler, [settings.truth], cell.alpha, cell.n, derive_seed(cell.seed, 1),
                settings.radius_n_mc, settings.sigma)
            values["critical_radius_oracle"] = self._critical_radius_oracle(settings, cell.alpha, cell.n)
        return values, ""

    @staticmethod
    def _critical_radius_oracle(settings: ComplexitySettings, alpha: float, n: int) -> float:
        def gap(eps: float) -> float:
            mass = gaussian_location_mass(eps, settings.sigma, settings.prior_sd, settings.truth)
            return -math.log(mass) / n - alpha * eps ** 2
        return float(optimize.brentq(gap, 1e-9, 1e3, xtol=1e-10))

    def _spectra_cell(self, cfg: ExperimentConfig, cell: Cell) -> CellOutcome:
        job = cfg.kernels[cell.i]
        kernel = make_kernel(job.family, job.a, job.nu)
        label = kernel.label()
        eig = kernel_spectra.eigensystem(kernel, job.truncation)
        analytic = eig.top(job.top)
        gram = kernel_spectra.gram_eigen_oracle(kernel, job.grid_size)[: job.top]
        rel = np.abs(analytic - gram) / np.abs(gram)

        values = {}
        for k in range(job.top):
            values[f"{label}/eigen_{k}"] = float(analytic[k])
            values[f"{label}/gram_{k}"] = float(gram[k])
            values[f"{label}/rel_error_{k}"] = float(rel[k])
        values[f"{label}/max_rel_error"] = float(np.max(rel))
        values[f"{label}/trace_error"] = abs(float(np.sum(eig.mercer_eigenvalues())) - kernel.k0)
        return values, label

    def _recipe(self, kind: str) -> Callable[[ExperimentConfig, Cell], CellOutcome]:
        return {
            "consistency": self._consistency_cell,
            "occam": self._occam_cell,
            "rate": self._rate_cell,
            "complexity": self._complexity_cell,
            "spectra": self._spectra_cell,
        }[kind]

    # ---- execution ----

    def _run_cell(self, cfg: ExperimentConfig, cell: Cell) -> Tuple[List[List[Any]], bool]:
        """Rows of one cell; a failure yields NaN rows tagged with the error"""
        names = self.statistics(cfg, cell)
        error = ""
        detail = ""
        try:
            values, detail = self._recipe(cfg.kind)(cfg, cell)
            log_cell("finished", cfg.name, cell.coordinates, f"n={cell.n} alpha={cell.alpha:g}")
        except Exception as e:
            logger.error(f"Error in {cfg.name} cell {cell.coordinates} (n={cell.n}, alpha={cell.alpha}): {e}")
            run_logger.log_cell_error(cfg.name, cell.coordinates, cell.seed, e)
            values = {}
            error = f"{type(e).__name__}: {e}"

        rows = [[cfg.name, cell.n, cell.alpha, cell.r, name, values.get(name, math.nan),
                 cell.seed, detail, error] for name in names]
        return rows, bool(error)

    async def run_async(self, cfg: ExperimentConfig, workers: Optional[int] = None) -> ExperimentResult:
        """Run every cell on a bounded worker pool and assemble the result"""
        workers = max(1, workers or self.workers)
        cells = self.cells(cfg)
        started = time.perf_counter()
        logger.info(f"Experiment {cfg.name} ({cfg.kind}, {cfg.family}) started: "
                    f"{len(cells)} cells, {workers} workers, master seed {cfg.master_seed}")
        run_logger.log_run_event("experiment started", experiment=cfg.name, experiment_kind=cfg.kind,
                                 cells=len(cells), master_seed=cfg.master_seed)

        semaphore = asyncio.Semaphore(workers)

        async def guarded(cell: Cell):
            async with semaphore:
                return await asyncio.to_thread(self._run_cell, cfg, cell)

        outcomes = await asyncio.gather(*(guarded(cell) for cell in cells))
        rows = sorted((row for cell_rows, _ in outcomes for row in cell_rows), key=_row_key)
        failed = sum(1 for _, errored in outcomes if errored)
        wall_time = time.perf_counter() - started

        logger.info(f"Experiment {cfg.name} finished in {format_duration(wall_time)}: "
                    f"{len(rows)} rows, {failed} failed cells")
        run_logger.log_run_event("experiment finished", experiment=cfg.name,
                                 rows=len(rows), failed_cells=failed)

        summary, plots = self.summarise(cfg, rows)
        return ExperimentResult(
            config=cfg,
            rows=rows,
            summary=summary,
            plots=plots,
            fingerprint=self.fingerprint(cfg, workers),
            wall_time=wall_time,
            cells=len(cells),
            failed_cells=failed,
            events=run_logger.drain(),
        )

    def run(self, cfg: ExperimentConfig, workers: Optional[int] = None) -> ExperimentResult:
        return asyncio.run(self.run_async(cfg, workers))

    def _run_kind(self, kind: str, cfg: ExperimentConfig, workers: Optional[int]) -> ExperimentResult:
        if cfg.kind != kind:
            raise ConfigError(f"expected a {kind} experiment, got {cfg.kind}")
        return self.run(cfg, workers)

    def run_consistency(self, cfg: ExperimentConfig, workers: Optional[int] = None) -> ExperimentResult:
        return self._run_kind("consistency", cfg, workers)

    def run_rate(self, cfg: ExperimentConfig, workers: Optional[int] = None) -> ExperimentResult:
        return self._run_kind("rate", cfg, workers)

    def run_occam(self, cfg: ExperimentConfig, workers: Optional[int] = None) -> ExperimentResult:
        return self._run_kind("occam", cfg, workers)

    def run_complexity(self, cfg: ExperimentConfig, workers: Optional[int] = None) -> ExperimentResult:
        return self._run_kind("complexity", cfg, workers)

    def run_spectra(self, cfg: ExperimentConfig, workers: Optional[int] = None) -> ExperimentResult:
        return self._run_kind("spectra", cfg, workers)

    @staticmethod
    def fingerprint(cfg: ExperimentConfig, workers: int) -> Dict[str, Any]:
        return {
            "package": "fracbayes",
            "version": __version__,
            "experiment": cfg.name,
            "kind": cfg.kind,
            "family": cfg.family,
            "master_seed": cfg.master_seed,
            "config_digest": cfg.digest(),
            "workers": workers,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        }

    # ---- aggregation ----

    def summarise(self, cfg: ExperimentConfig,
                  rows: Sequence[List[Any]]) -> Tuple[List[List[Any]], Dict[str, List[Tuple[float, ...]]]]:
        """Per (n, alpha, statistic) mean and se, fitted slopes and plot series"""
        groups: Dict[Tuple[int, float, str], List[List[Any]]] = {}
        for row in rows:
            key = (row[1], row[2], row[4])
            groups.setdefault(key, []).append(row)

        summary = []
        for (n, alpha, statistic), members in sorted(groups.items(), key=lambda kv: _group_key(kv[0])):
            values = np.array([r[5] for r in members if not r[8]], dtype=float)
            values = values[np.isfinite(values)]
            errors = sum(1 for r in members if r[8])
            mean = float(values.mean()) if values.size else math.nan
            se = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else math.nan
            summary.append([cfg.name, n, alpha, statistic, mean, se, int(values.size), errors])

        summary.extend(self._slopes(cfg, summary))
        return summary, self._plot_series(cfg, summary)

    def _slopes(self, cfg: ExperimentConfig, summary: Sequence[List[Any]]) -> List[List[Any]]:
        """Fitted slopes across the n-grid for rate and complexity experiments"""
        target = {"rate": "l2_error", "complexity": "n_complexity"}.get(cfg.kind)
        if target is None:
            return []
        out = []
        for alpha in cfg.alpha_grid:
            points = [(row[1], row[4]) for row in summary
                      if row[3] == target and row[2] == alpha and math.isfinite(row[4])]
            if len(points) < 3:
                logger.warning(f"{cfg.name}: fewer than three finite points for the {target} slope")
                continue
            ns, means = (np.array(v, dtype=float) for v in zip(*points))
            if cfg.kind == "rate":
                if np.any(means <= 0):
                    continue
                slope, se = fit_loglog_slope(ns, means)
                name = "l2_error_slope"
            else:
                fit = stats.linregress(np.log(ns), means)
                slope, se = float(fit.slope), float(fit.stderr)
                name = "n_complexity_log_n_slope"
            out.append([cfg.name, math.nan, alpha, name, slope, se, len(points), 0])
        return out

    @staticmethod
    def _plot_series(cfg: ExperimentConfig,
                     summary: Sequence[List[Any]]) -> Dict[str, List[Tuple[float, ...]]]:
        plots: Dict[str, List[Tuple[float, ...]]] = {}
        if cfg.kind == "spectra":
            for job in cfg.kernels:
                label = make_kernel(job.family, job.a, job.nu).label()
                means = {row[3]: row[4] for row in summary if row[3].startswith(label + "/")}
                plots[f"{label}_spectrum"] = [
                    (k, means.get(f"{label}/eigen_{k}", math.nan), means.get(f"{label}/gram_{k}", math.nan))
                    for k in range(job.top)
                ]
            return plots
        for row in summary:
            _, n, alpha, statistic, mean, se = row[:6]
            if isinstance(n, float) and math.isnan(n):
                continue
            plots.setdefault(f"{statistic}_alpha{alpha:g}", []).append((n, mean, se))
        return plots

    # ---- persistence ----

    async def write_outputs(self, result: ExperimentResult, output_dir: Optional[str] = None) -> str:
        """results.csv, summary.csv, plots/, manifest.json and events.jsonl"""
        target = self.storage.for_directory(output_dir or result.config.output_dir)
        await target.write_table("results.csv", RESULT_HEADER, result.rows)
        await target.write_table("summary.csv", SUMMARY_HEADER, result.summary)
        for name, series in result.plots.items():
            await target.write_plot_series(name, series)
        await target.write_json_async("manifest.json", result.manifest())
        await target.write_events(run_logger.to_jsonl(result.events), RUN_LOG_FILENAME)
        logger.info(f"Artifacts for {result.config.name} written to {target.output_dir}")
        return target.output_dir


def _alpha_key(alpha: float) -> float:
    return -1.0 if math.isnan(alpha) else alpha


def _row_key(row: Sequence[Any]) -> Tuple[Any, ...]:
    return (row[1], _alpha_key(row[2]), row[3], row[4])


def _group_key(key: Tuple[int, float, str]) -> Tuple[Any, ...]:
    n, alpha, statistic = key
    return (n, _alpha_key(alpha), statistic)


# Global harness instance
harness = ExperimentHarness()
