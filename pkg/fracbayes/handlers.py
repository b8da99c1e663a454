"""
Command handlers for the fracbayes command line
One handler per subcommand; each returns the process exit code
"""

import argparse
import logging
import math
from typing import Any, Dict, Optional, Set

import numpy as np

from config import DEFAULT_WORKERS, OUTPUT_DIR, RUN_LOG_FILENAME
from fracbayes.density_regression import DrvsHyper, density_regression
from fracbayes.divergence_lab import DensityRatioSampler, density_from_spec, divergence_lab
from fracbayes.exceptions import ConfigError, FracBayesError
from fracbayes.gp_model import GpConfig, RegressionData
from fracbayes.harness import ExperimentConfig, generate_regression_data, harness
from fracbayes.identifiability import gaussian_location_sampler, identifiability, truth_from_spec
from fracbayes.kernel_spectra import kernel_spectra, make_kernel
from fracbayes.model_space import ModelIndex, ModelPosterior, model_space
from fracbayes.run_logger import run_logger
from fracbayes.storage import ResultStorage, storage

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CELL_ERRORS = 1
EXIT_CONFIG_ERROR = 2
EXIT_FAILURE = 3

DIVERGENCE_KEYS = {"p", "q", "measure", "alpha", "estimator", "n_mc", "seed", "identity_check"}
SPECTRUM_KEYS = {"family", "a", "nu", "m", "grid_size", "entropy"}
COMPLEXITY_KEYS = {"prior_sd", "sigma", "truth", "n", "eps_grid", "n_mc", "seed", "alpha"}
DELTA_KEYS = {"truth", "p", "trunc", "mc"}
DATA_KEYS = {"truth", "p", "d0", "n", "sigma", "seed", "alpha", "data"}
GPVS_KEYS = DATA_KEYS | {"estimator", "iterations", "gp"}
DRVS_KEYS = DATA_KEYS | {"drvs", "evidence_draws", "evidence_method", "chain"}


def _load(args: argparse.Namespace, allowed: Set[str]) -> Dict[str, Any]:
    """Read the subcommand's JSON document and reject unknown keys"""
    doc = storage.read_config(args.config)
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {args.config}: {sorted(unknown)}")
    return doc


def _target(args: argparse.Namespace, default: Optional[str] = None) -> ResultStorage:
    return storage.for_directory(getattr(args, "out", None) or default or OUTPUT_DIR)


def _regression_data(doc: Dict[str, Any]) -> RegressionData:
    """Data from a CSV file (last column y) or simulated from a truth block"""
    if doc.get("data"):
        try:
            table = np.loadtxt(doc["data"], delimiter=",", skiprows=1, ndmin=2)
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot read data file {doc['data']}: {e}") from e
        return RegressionData(table[:, :-1], table[:, -1])
    if "truth" not in doc or "n" not in doc:
        raise ConfigError("either 'data' or both 'truth' and 'n' are required")
    truth = truth_from_spec(doc["truth"], int(doc.get("p", 1)))
    return generate_regression_data(truth, int(doc["n"]), float(doc.get("sigma", 0.5)),
                                    int(doc.get("seed", 0)))


def _posterior_diagnostics(post: ModelPosterior, doc: Dict[str, Any], p: int) -> Dict[str, Any]:
    mode = model_space.posterior_mode(post)
    report = {
        "estimator": post.estimator,
        "alpha": post.alpha,
        "mode": str(mode),
        "mode_probability": post.probability(mode),
        "diagnostics": post.diagnostics,
    }
    if doc.get("truth"):
        truth = ModelIndex(truth_from_spec(doc["truth"], p).support)
        report["true_model"] = str(truth)
        report["selection_probability"] = model_space.selection_probability(post, truth)
    return report


async def _write_events(target: ResultStorage):
    await target.write_events(run_logger.to_jsonl(run_logger.drain()), RUN_LOG_FILENAME)


async def divergence_command(args: argparse.Namespace) -> int:
    """One divergence between two densities, optionally with the fractional identity check"""
    doc = _load(args, DIVERGENCE_KEYS)
    p, q = density_from_spec(doc["p"]), density_from_spec(doc["q"])
    name = getattr(args, "measure", None) or doc.get("measure")
    if not name:
        raise ConfigError("divergence needs a measure name (--measure or 'measure')")
    alpha = getattr(args, "alpha", None)
    alpha = float(doc.get("alpha", 0.5) if alpha is None else alpha)
    options = {"estimator": doc.get("estimator", "quadrature"),
               "n_mc": int(doc.get("n_mc", 100_000)), "seed": int(doc.get("seed", 0))}

    value = divergence_lab.measure(name, p, q, alpha if name.lower() in ("renyi", "affinity") else None,
                                   **options)
    logger.info(f"{name} = {value.value:.10g} ({value.estimator})")

    target = _target(args)
    await target.write_table("divergences.csv", ["measure", "value", "se", "estimator"],
                             [[name, value.value, value.se, value.estimator]])
    report = {"measure": name, "alpha": alpha, "infinite": value.infinite,
              "diagnostic": value.diagnostic}

    if doc.get("identity_check"):
        check = divergence_lab.fractional_identity_check(
            DensityRatioSampler(p, q), alpha, options["n_mc"], options["seed"])
        await target.write_table("identity.csv",
                                 ["alpha", "mean", "se", "theory", "passed", "degenerate"],
                                 [[alpha, check.mean, check.se, check.theory, check.passed,
                                   check.degenerate]])
        report["identity_passed"] = check.passed
    await target.write_json_async("divergence_diagnostics.json", report)
    await _write_events(target)
    return EXIT_OK


async def kernel_spectrum_command(args: argparse.Namespace) -> int:
    """Eigen table of a stationary kernel, its Gram oracle and entropy bounds"""
    doc = _load(args, SPECTRUM_KEYS) if args.config else {}
    for key in ("family", "a", "nu", "m", "grid_size"):
        if getattr(args, key, None) is not None:
            doc[key] = getattr(args, key)
    if not doc:
        raise ConfigError("kernel-spectrum needs --config or --family")
    kernel = make_kernel(doc.get("family", "se"), float(doc.get("a", 1.0)), doc.get("nu"))
    m = int(doc.get("m", kernel_spectra.truncation))
    table = kernel_spectra.eigen_table(kernel, m)
    eig = kernel_spectra.eigensystem(kernel, m)

    target = _target(args)
    await target.write_table(
        "eigen.csv", ["index", "eigenvalue", "eigenfunction", "comparator", "ratio"],
        [[r["index"], r["eigenvalue"], r["eigenfunction"], r["comparator"], r["ratio"]] for r in table])

    diagnostics = {
        "kernel": kernel.label(),
        "m": eig.m,
        "k0": kernel.k0,
        "mercer_trace": float(np.sum(eig.mercer_eigenvalues())),
        "clamped": eig.clamped,
        "indefinite": eig.indefinite,
    }
    if doc.get("grid_size"):
        oracle = kernel_spectra.gram_eigen_oracle(kernel, int(doc["grid_size"]))
        interval = kernel_spectra.gram_eigen_oracle(kernel, int(doc["grid_size"]), periodic=False)
        count = min(eig.m, oracle.size)
        analytic = eig.top(count)
        await target.write_table("gram_oracle.csv", ["rank", "analytic", "gram", "gram_interval"],
                                 [[k, analytic[k], oracle[k], interval[k]] for k in range(count)])
        diagnostics["grid_size"] = int(doc["grid_size"])

    entropy = doc.get("entropy")
    if entropy:
        d = int(entropy.get("d", 1))
        rows = [[d, eps, kernel_spectra.entropy_lower_bound(kernel.a, d, float(eps))]
                for eps in entropy.get("eps", [])]
        await target.write_table("entropy.csv", ["d", "epsilon", "log_covering_lower_bound"], rows)

    await target.write_json_async("spectrum_diagnostics.json", diagnostics)
    await _write_events(target)
    logger.info(f"Spectrum of {kernel.label()}: {eig.m} eigenvalues, trace {diagnostics['mercer_trace']:.10g}")
    return EXIT_OK


async def complexity_command(args: argparse.Namespace) -> int:
    """Complexity profile in the Gaussian location model"""
    doc = _load(args, COMPLEXITY_KEYS)
    sampler = gaussian_location_sampler(float(doc.get("prior_sd", 1.0)))
    truth = [float(doc.get("truth", 0.0))]
    n = int(doc["n"]) if "n" in doc else 1000
    sigma = float(doc.get("sigma", 1.0))
    seed = int(doc.get("seed", 0))
    n_mc = int(doc.get("n_mc", 100_000))
    eps_grid = doc.get("eps_grid") or list(np.geomspace(1e-3, 1.0, 25))

    profile = identifiability.complexity_profile(sampler, truth, eps_grid, n, n_mc, seed, sigma)
    target = _target(args)
    await target.write_table(
        "complexity.csv", ["epsilon", "mass", "se", "complexity", "censored", "ci_low", "ci_high"],
        [est.row() + [est.ci_low, est.ci_high] for est in profile])

    if doc.get("alpha") is not None:
        radius = identifiability.critical_radius(sampler, truth, float(doc["alpha"]), n, seed,
                                                 n_mc, sigma)
        await target.write_json_async("critical_radius.json",
                                      {"alpha": float(doc["alpha"]), "n": n, "critical_radius": radius})
        logger.info(f"Critical radius at n={n}, alpha={doc['alpha']}: {radius:.6g}")
    await _write_events(target)
    return EXIT_OK


async def delta_command(args: argparse.Namespace) -> int:
    """Identifiability gap of a truth by the cosine basis and optionally by Monte Carlo"""
    doc = _load(args, DELTA_KEYS)
    if "truth" not in doc:
        raise ConfigError("delta needs a truth block")
    truth = truth_from_spec(doc["truth"], int(doc.get("p", 1)))
    estimates = [identifiability.delta_basis(truth, doc.get("trunc"))]
    mc = doc.get("mc")
    if mc:
        estimates.append(identifiability.delta_mc(truth, int(mc.get("n_outer", 1000)),
                                                  int(mc.get("n_inner", 1000)), int(mc.get("seed", 0))))

    rows = []
    for est in estimates:
        rows.append([est.method, "min", est.delta_sq, est.se, est.tail])
        rows.extend([est.method, j, value, math.nan, math.nan]
                    for j, value in sorted(est.per_coordinate.items()))
        logger.info(f"delta^2 ({est.method}) for {truth.name}: {est.delta_sq:.8g}")

    target = _target(args)
    await target.write_table("delta.csv", ["method", "coordinate", "delta_sq", "se", "tail"], rows)
    await _write_events(target)
    return EXIT_OK


async def gpvs_run_command(args: argparse.Namespace) -> int:
    """GPVS model posterior for one dataset"""
    doc = _load(args, GPVS_KEYS)
    data = _regression_data(doc)
    p = int(doc.get("p", data.p))
    d0 = int(doc.get("d0", p))
    alpha = float(doc.get("alpha", 1.0))
    cfg = GpConfig.from_dict(doc.get("gp"))

    if doc.get("estimator", "exact") == "mcmc":
        post = model_space.mcmc_posterior(data, p, d0, cfg, alpha,
                                          int(doc.get("iterations", 10_000)), int(doc.get("seed", 0)))
    else:
        post = model_space.enumerate_posterior(data, p, d0, cfg, alpha, args.workers)

    target = _target(args)
    header = ["subset", "log_evidence", "prior", "posterior"]
    await target.write_table("models.csv", header, post.rows())
    report = _posterior_diagnostics(post, doc, p)
    report["gp"] = cfg.to_dict()
    await target.write_json_async("diagnostics.json", report)
    await _write_events(target)
    logger.info(f"GPVS posterior mode {report['mode']} with probability {report['mode_probability']:.4f}")
    return EXIT_OK


async def drvs_run_command(args: argparse.Namespace) -> int:
    """DRVS model posterior and a mixture chain for one dataset"""
    doc = _load(args, DRVS_KEYS)
    data = _regression_data(doc)
    p = int(doc.get("p", data.p))
    d0 = int(doc.get("d0", p))
    alpha = float(doc.get("alpha", 1.0))
    seed = int(doc.get("seed", 0))
    hyper = DrvsHyper.from_dict(doc.get("drvs"))

    post = density_regression.drvs_model_posterior(data, p, d0, hyper, alpha, seed,
                                                   doc.get("evidence_draws"), args.workers,
                                                   doc.get("evidence_method"))
    chain_doc = doc.get("chain") or {}
    subset = ModelIndex(tuple(chain_doc["subset"])) if "subset" in chain_doc \
        else model_space.posterior_mode(post)
    chain = density_regression.drvs_posterior_sampler(
        data, subset.indices, hyper=hyper, iters=int(chain_doc.get("iterations", 2000)),
        seed=seed + 1, alpha=alpha, thin=int(chain_doc.get("thin", 10)))

    target = _target(args)
    await target.write_table("models.csv", ["subset", "log_evidence", "prior", "posterior", "se"],
                             post.rows())
    await target.write_table(
        "mixture_draws.csv",
        ["draw", "component", "weight", "mu_y", "sigma"] + [f"mu_x{j}" for j in subset.indices],
        chain.rows())
    report = _posterior_diagnostics(post, doc, p)
    report["chain"] = {"subset": str(subset), "acceptance": chain.acceptance, **chain.diagnostics}
    report["drvs"] = hyper.to_dict()
    await target.write_json_async("diagnostics.json", report)
    await _write_events(target)
    return EXIT_OK


async def experiment_command(args: argparse.Namespace) -> int:
    """Run an experiment grid; exit code 1 when any cell failed"""
    cfg = ExperimentConfig.from_dict(storage.read_config(args.config))
    result = await harness.run_async(cfg, args.workers or DEFAULT_WORKERS)
    await harness.write_outputs(result, getattr(args, "out", None))
    if not result.ok:
        logger.error(f"{result.failed_cells} of {result.cells} cells failed in {cfg.name}")
        return EXIT_CELL_ERRORS
    return EXIT_OK


COMMANDS = {
    "divergence": divergence_command,
    "kernel-spectrum": kernel_spectrum_command,
    "complexity": complexity_command,
    "delta": delta_command,
    "gpvs-run": gpvs_run_command,
    "drvs-run": drvs_run_command,
    "experiment": experiment_command,
}


async def dispatch(args: argparse.Namespace) -> int:
    """Run one subcommand and map failures to exit codes"""
    handler = COMMANDS[args.command]
    try:
        return await handler(args)
    except ConfigError as e:
        logger.error(f"Invalid configuration for {args.command}: {e}")
        return EXIT_CONFIG_ERROR
    except FracBayesError as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        return EXIT_FAILURE
    except Exception as e:
        logger.error(f"Unexpected error in {args.command}: {e}")
        return EXIT_FAILURE
