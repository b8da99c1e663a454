"""
Utility functions shared across fracbayes
"""

import hashlib
import logging
import re
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

logger = logging.getLogger(__name__)


def derive_seed(master_seed: int, *coordinates: int) -> int:
    """Derive an independent 32-bit seed for one grid cell.

    The digest covers the master seed and every coordinate, so two cells
    never share a random stream and the mapping is platform independent.
    """
    key = ":".join(str(int(c)) for c in (master_seed, *coordinates))
    digest = hashlib.blake2b(key.encode("ascii"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % (2 ** 32)


def log_mean_exp(values: np.ndarray) -> float:
    """log(mean(exp(values))) without overflow"""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("log_mean_exp of an empty array")
    return float(logsumexp(values) - np.log(values.size))


def effective_sample_size(log_weights: np.ndarray) -> float:
    """Kish effective sample size of importance weights given in log space"""
    log_weights = np.asarray(log_weights, dtype=float)
    if not np.isfinite(log_weights).any():
        return 0.0
    w = np.exp(log_weights - np.max(log_weights))
    return float(w.sum() ** 2 / np.sum(w ** 2))


def batch_means_se(samples: np.ndarray, n_batches: int = 20) -> float:
    """Standard error of a chain average by non-overlapping batch means"""
    samples = np.asarray(samples, dtype=float)
    size = samples.size // n_batches
    if size < 2:
        return float(np.std(samples, ddof=1) / np.sqrt(max(samples.size, 1)))
    batches = samples[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(np.std(batches, ddof=1) / np.sqrt(n_batches))


def format_subset(indices: Iterable[int]) -> str:
    """Format covariate indices as '{1,3}' ('{}' for the empty model)"""
    return "{" + ",".join(str(i) for i in indices) + "}"


def parse_subset(text: str) -> Tuple[int, ...]:
    """Parse '{1,3}', '1,3', '[1, 3]' or '' into a sorted index tuple"""
    cleaned = re.sub(r"[{}\[\]()\s]", "", text or "")
    if not cleaned:
        return ()
    return tuple(sorted({int(token) for token in cleaned.split(",") if token}))


def format_duration(seconds: float) -> str:
    """Format seconds into human readable duration"""
    if seconds < 60:
        return f"{seconds:.1f} seconds"
    elif seconds < 3600:
        minutes = seconds / 60
        return f"{minutes:.1f} minutes"
    else:
        hours = seconds / 3600
        return f"{hours:.2f} hours"


def format_float(value: Optional[float]) -> str:
    """Exact, locale independent float text for CSV output"""
    if value is None:
        return ""
    value = float(value)
    if np.isnan(value):
        return "nan"
    if np.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.17g}"


def fit_loglog_slope(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float]:
    """Least-squares slope of log y on log x and its standard error"""
    from scipy.stats import linregress

    x = np.log(np.asarray(x, dtype=float))
    y = np.log(np.asarray(y, dtype=float))
    if x.size < 3 or np.ptp(x) == 0:
        raise ValueError("a log-log slope needs at least three distinct x values")
    fit = linregress(x, y)
    return float(fit.slope), float(fit.stderr)


def log_cell(action: str, experiment: str, cell: Tuple[int, ...], detail: str = ""):
    """Log one experiment-cell event"""
    log_message = f"{action.upper()}: {experiment} cell {cell}"
    if detail:
        log_message += f" - {detail}"

    logger.info(log_message)
