"""
Configuration settings for fracbayes
"""

import os
from typing import Optional

# Logging configuration
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("LOG_FILE", "fracbayes.log")

# Run log (structured numerical events, one JSON object per line)
ENABLE_RUN_LOG = os.getenv("ENABLE_RUN_LOG", "true").lower() == "true"
RUN_LOG_FILENAME = "events.jsonl"

# Divergence quadrature
QUAD_ABS_TOL = float(os.getenv("QUAD_ABS_TOL", "1e-9"))
QUAD_REL_TOL = float(os.getenv("QUAD_REL_TOL", "1e-10"))
QUAD_LIMIT = int(os.getenv("QUAD_LIMIT", "200"))
GAUSSIAN_SPAN_SIGMAS = 10.0  # Gaussians integrated on [mu - 10 sd, mu + 10 sd]
DENSITY_CHECK_POINTS = 513
DENSITY_TOLERANCE = 1e-12

# Kernel spectra
EIGEN_TRUNCATION = int(os.getenv("EIGEN_TRUNCATION", "400"))
EIGEN_QUAD_ABS_TOL = float(os.getenv("EIGEN_QUAD_ABS_TOL", "1e-13"))
NEGATIVE_EIGEN_TOL = 1e-12  # round-off negatives above -tol are clamped to 0
GRAM_MIN_GRID = 16
ENTROPY_CONSTANT = float(os.getenv("ENTROPY_CONSTANT", "1.0"))
EVEN_KERNEL_TOL = 1e-12

# Gaussian-process model
DEFAULT_NOISE_SD = float(os.getenv("DEFAULT_NOISE_SD", "0.5"))
BANDWIDTH_PRIOR_SHAPE = float(os.getenv("BANDWIDTH_PRIOR_SHAPE", "2.0"))
BANDWIDTH_PRIOR_SCALE = float(os.getenv("BANDWIDTH_PRIOR_SCALE", "5.0"))
DEFAULT_SMOOTHNESS = float(os.getenv("DEFAULT_SMOOTHNESS", "1.0"))
SUP_NORM_CAP = float(os.getenv("SUP_NORM_CAP", "10.0"))
BANDWIDTH_GRID_SIZE = int(os.getenv("BANDWIDTH_GRID_SIZE", "64"))
BANDWIDTH_MAX_FACTOR = 4.0  # a_max = 4 n
JITTER_BASE = 1e-10  # times the trace
JITTER_GROWTH = 10.0
JITTER_MAX_RETRIES = 5
PRIOR_SAMPLE_RETRIES = int(os.getenv("PRIOR_SAMPLE_RETRIES", "100"))

# Model space
ENUMERATION_BUDGET = int(os.getenv("ENUMERATION_BUDGET", str(2 ** 15)))
MCMC_BURN_IN_FRACTION = 0.2
MOVE_PROBABILITIES = {
    "add": 0.4,
    "delete": 0.4,
    "swap": 0.2,
}
ANTI_CONCENTRATION_DESIGN_SIZE = 256

# Density regression
DRVS_EVIDENCE_DRAWS = int(os.getenv("DRVS_EVIDENCE_DRAWS", "20000"))
DRVS_EVIDENCE_METHOD = os.getenv("DRVS_EVIDENCE_METHOD", "tempered-smc")
DRVS_SMC_PARTICLES = int(os.getenv("DRVS_SMC_PARTICLES", "512"))
DRVS_SMC_ESS_FRACTION = 0.5  # next temperature keeps this share of particles
DRVS_SMC_MOVES = int(os.getenv("DRVS_SMC_MOVES", "3"))
DRVS_SMC_MAX_STEPS = 1000
DRVS_MIN_ESS = 10.0
DRVS_CHUNK_SIZE = 256
DIRICHLET_REJECTION_BUDGET = int(os.getenv("DIRICHLET_REJECTION_BUDGET", "100000"))
SCHEDULE_T_OFFSET = 0.01  # t set to its infimum plus this offset
DRVS_MCMC_ITERATIONS = int(os.getenv("DRVS_MCMC_ITERATIONS", "2000"))
DRVS_THIN = 10
DRVS_PROPOSAL_SCALES = {
    "mu_y": 0.5,
    "mu_x": 0.1,
    "weights": 0.1,
}
DRVS_DEFAULTS = {
    "a": 10.0,      # Dirichlet total concentration, a/m per component
    "b": 2.0,       # weight floor 1/(b m)
    "a2": 1.0,      # mu^y prior rate: density proportional to exp(-a2 |mu|^tau1)
    "tau": 1.0,
    "tau1": 1.0,
    "tau2": 1.0,
    "beta": 1.0,
}

# Identifiability
DELTA_TRUNCATION = int(os.getenv("DELTA_TRUNCATION", "32"))
SUP_NORM_GRID_SIZE = 10_000
COMPLEXITY_MIN_DRAWS = 1000
CRITICAL_RADIUS_TOL = 1e-3
CRITICAL_RADIUS_FLOOR = 1e-6

# Harness
CONFIG_SCHEMA_VERSION = 1
DEFAULT_WORKERS = int(os.getenv("FRACBAYES_WORKERS", "1"))
OUTPUT_DIR = os.getenv("FRACBAYES_OUTPUT_DIR", "results")
RATE_TEST_POINTS = 1000
MCMC_DEFAULT_ITERATIONS = 50_000


def master_seed_override() -> Optional[int]:
    """FRACBAYES_SEED, when set, replaces the master seed of any experiment"""
    value = os.getenv("FRACBAYES_SEED")
    if value is None or value.strip() == "":
        return None
    return int(value)
