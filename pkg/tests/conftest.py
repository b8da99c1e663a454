"""Shared fixtures for the fracbayes test suite."""

import numpy as np
import pytest

from fracbayes.run_logger import run_logger


@pytest.fixture(autouse=True)
def fresh_run_log():
    """Every test starts with an empty run log."""
    run_logger.drain()
    yield
    run_logger.drain()


@pytest.fixture
def rng():
    """Seeded generator for test-side randomness."""
    return np.random.default_rng(20240601)


@pytest.fixture
def tmp_output(tmp_path):
    """Output directory for artifacts written during a test."""
    out = tmp_path / "out"
    out.mkdir()
    return out
