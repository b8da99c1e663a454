"""Tests for fracbayes.harness."""

import asyncio
import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest

from fracbayes.exceptions import ArgumentError, ConfigError
from fracbayes.harness import (
    RESULT_HEADER,
    SUMMARY_HEADER,
    ExperimentConfig,
    ExperimentHarness,
    generate_regression_data,
    harness,
)
from fracbayes.identifiability import gaussian_location_mass, make_truth
from fracbayes.storage import ResultStorage
from fracbayes.utils import derive_seed


@pytest.fixture(autouse=True)
def no_seed_override(monkeypatch):
    monkeypatch.delenv("FRACBAYES_SEED", raising=False)


def consistency_doc(**overrides):
    doc = {
        "schema_version": 1,
        "name": "tiny-consistency",
        "kind": "consistency",
        "truth": {"name": "single_sine", "support": [1]},
        "p": 3,
        "d0": 2,
        "sigma": 0.3,
        "n_grid": [30, 60],
        "alpha_grid": [0.5, 1.0],
        "replicates": 2,
        "master_seed": 11,
        "gp": {"grid_size": 8},
    }
    doc.update(overrides)
    return doc


def summary_row(result, statistic, n=None, alpha=None):
    for row in result.summary:
        if row[3] != statistic:
            continue
        if n is not None and row[1] != n:
            continue
        if alpha is not None and row[2] != alpha:
            continue
        return row
    raise AssertionError(f"no summary row for {statistic}")


# =============================================================================
# Configuration
# =============================================================================


class TestExperimentConfig:
    """Validation of experiment documents."""

    def test_valid_document(self):
        cfg = ExperimentConfig.from_dict(consistency_doc())
        assert cfg.n_grid == (30, 60)
        assert cfg.alpha_grid == (0.5, 1.0)
        assert cfg.truth.support == (1,)
        assert cfg.gp.grid_size == 8

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="unknown keys"):
            ExperimentConfig.from_dict(consistency_doc(replicate=3))

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(consistency_doc(gp={"bandwith": 2.0}))
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(consistency_doc(mcmc={"iters": 10}))

    def test_schema_version(self):
        with pytest.raises(ConfigError, match="schema_version"):
            ExperimentConfig.from_dict(consistency_doc(schema_version=2))

    @pytest.mark.parametrize("grid", [[], [50, 50], [100, 50]])
    def test_n_grid_strictly_increasing(self, grid):
        with pytest.raises(ConfigError, match="n_grid"):
            ExperimentConfig.from_dict(consistency_doc(n_grid=grid))

    @pytest.mark.parametrize("alpha", [0.0, 1.5, -0.2])
    def test_alpha_range(self, alpha):
        with pytest.raises(ConfigError, match="alpha"):
            ExperimentConfig.from_dict(consistency_doc(alpha_grid=[alpha]))

    def test_replicates(self):
        with pytest.raises(ConfigError, match="replicates"):
            ExperimentConfig.from_dict(consistency_doc(replicates=0))

    def test_unknown_kind_and_family(self):
        with pytest.raises(ConfigError, match="kind"):
            ExperimentConfig.from_dict(consistency_doc(kind="bootstrap"))
        with pytest.raises(ConfigError, match="family"):
            ExperimentConfig.from_dict(consistency_doc(family="lasso"))

    def test_truth_support_fits_d0(self):
        with pytest.raises(ConfigError, match="d0"):
            ExperimentConfig.from_dict(consistency_doc(truth={"name": "additive_sine"}, d0=1))

    def test_seed_override(self, monkeypatch):
        monkeypatch.setenv("FRACBAYES_SEED", "99")
        cfg = ExperimentConfig.from_dict(consistency_doc())
        assert cfg.master_seed == 99
        assert cfg.raw["master_seed"] == 99

    def test_digest_tracks_content(self):
        first = ExperimentConfig.from_dict(consistency_doc())
        again = ExperimentConfig.from_dict(consistency_doc())
        other = ExperimentConfig.from_dict(consistency_doc(master_seed=12))
        assert first.digest() == again.digest()
        assert first.digest() != other.digest()

    def test_drvs_evidence_draws(self):
        cfg = ExperimentConfig.from_dict(consistency_doc(
            family="drvs", drvs={"m": 2, "sigma": 0.5, "evidence_draws": 300}))
        assert cfg.evidence_draws == 300
        assert cfg.drvs.m == 2
        assert cfg.evidence_method == "tempered-smc"

    def test_drvs_evidence_method(self):
        cfg = ExperimentConfig.from_dict(consistency_doc(
            family="drvs", drvs={"m": 2, "sigma": 0.5, "evidence_method": "prior-importance"}))
        assert cfg.evidence_method == "prior-importance"
        with pytest.raises(ConfigError, match="evidence_method"):
            ExperimentConfig.from_dict(consistency_doc(
                family="drvs", drvs={"m": 2, "sigma": 0.5, "evidence_method": "nested"}))

    def test_spectra_needs_kernels(self):
        doc = {"schema_version": 1, "name": "s", "kind": "spectra"}
        with pytest.raises(ConfigError, match="kernels"):
            ExperimentConfig.from_dict(doc)
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(dict(doc, kernels=[{"family": "periodic", "a": 1.0}]))

    def test_rate_is_gpvs_only(self):
        with pytest.raises(ConfigError, match="gpvs"):
            ExperimentConfig.from_dict(consistency_doc(kind="rate", family="drvs"))


# =============================================================================
# Synthetic data
# =============================================================================


class TestGenerateRegressionData:
    """Uniform designs with Gaussian noise around the truth."""

    def test_noiseless(self):
        truth = make_truth("additive_sine", 4)
        data = generate_regression_data(truth, 200, 0.0, seed=1)
        np.testing.assert_array_equal(data.y - truth(data.X), 0.0)

    def test_noise_variance(self):
        truth = make_truth("single_sine", 2)
        sigma, n = 0.5, 20_000
        data = generate_regression_data(truth, n, sigma, seed=2)
        residual = data.y - truth(data.X)
        se = sigma ** 2 * math.sqrt(2.0 / (n - 1))
        assert abs(np.var(residual, ddof=1) - sigma ** 2) <= 4 * se

    def test_design_is_uniform_cube(self):
        data = generate_regression_data(make_truth("linear", 3), 500, 0.1, seed=3)
        assert data.X.shape == (500, 3)
        assert data.X.min() >= 0.0 and data.X.max() <= 1.0

    def test_same_seed_same_bytes(self):
        truth = make_truth("single_sine", 2)
        first = generate_regression_data(truth, 50, 0.5, seed=4)
        second = generate_regression_data(truth, 50, 0.5, seed=4)
        assert first.X.tobytes() == second.X.tobytes()
        assert first.y.tobytes() == second.y.tobytes()

    def test_needs_observations(self):
        with pytest.raises(ArgumentError):
            generate_regression_data(make_truth("single_sine", 1), 0, 0.5, seed=0)


# =============================================================================
# Grid and seeds
# =============================================================================


class TestGrid:
    """Cells of an experiment grid."""

    def test_seeds_follow_cell_coordinates(self):
        cfg = ExperimentConfig.from_dict(consistency_doc())
        cells = harness.cells(cfg)
        assert len(cells) == 2 * 2 * 2
        for cell in cells:
            assert cell.seed == derive_seed(11, cell.i, cell.j, cell.r)
        assert len({cell.seed for cell in cells}) == len(cells)


# =============================================================================
# Experiments
# =============================================================================


class TestConsistency:
    """Selection probabilities and Bayes factors per cell."""

    @pytest.fixture(scope="class")
    def result(self):
        with pytest.MonkeyPatch.context() as mp:
            mp.delenv("FRACBAYES_SEED", raising=False)
            cfg = ExperimentConfig.from_dict(consistency_doc())
        return ExperimentHarness().run_consistency(cfg)

    def test_row_count(self, result):
        assert len(result.rows) == 2 * 2 * 2 * 5
        assert result.ok
        assert result.cells == 8

    def test_every_row_carries_its_seed(self, result):
        for row in result.rows:
            _, n, alpha, replicate, _, _, seed, _, error = row
            i = [30, 60].index(n)
            j = [0.5, 1.0].index(alpha)
            assert seed == derive_seed(11, i, j, replicate)
            assert error == ""

    def test_values_in_range(self, result):
        for row in result.rows:
            if row[4] in ("selection_probability", "mode_is_truth"):
                assert 0.0 <= row[5] <= 1.0
            if row[4] == "mode_size":
                assert row[5] <= 2
        assert all(row[7].startswith("{") for row in result.rows)

    def test_summary_aggregates_replicates(self, result):
        row = summary_row(result, "selection_probability", n=60, alpha=1.0)
        values = [r[5] for r in result.rows
                  if r[1] == 60 and r[2] == 1.0 and r[4] == "selection_probability"]
        assert row[4] == pytest.approx(np.mean(values))
        assert row[5] == pytest.approx(np.std(values, ddof=1) / math.sqrt(2))
        assert row[6] == 2

    def test_single_replicate_has_nan_se(self):
        cfg = ExperimentConfig.from_dict(consistency_doc(replicates=1, n_grid=[30], alpha_grid=[1.0]))
        result = ExperimentHarness().run_consistency(cfg)
        assert math.isnan(summary_row(result, "selection_probability")[5])

    def test_wrong_kind(self):
        cfg = ExperimentConfig.from_dict(consistency_doc())
        with pytest.raises(ConfigError):
            harness.run_rate(cfg)

    def test_mcmc_checked_against_enumeration(self):
        cfg = ExperimentConfig.from_dict(consistency_doc(
            n_grid=[40], alpha_grid=[1.0], replicates=1, estimator="mcmc",
            mcmc={"iterations": 3000, "compare_exact": True}))
        result = ExperimentHarness().run_consistency(cfg)
        tv = [row[5] for row in result.rows if row[4] == "tv_to_exact"]
        assert len(tv) == 1
        assert 0.0 <= tv[0] <= 0.25

    def test_drvs_family(self):
        cfg = ExperimentConfig.from_dict(consistency_doc(
            family="drvs", p=2, d0=1, n_grid=[20], alpha_grid=[1.0], replicates=1,
            drvs={"m": 2, "sigma": 0.5, "evidence_draws": 256}))
        result = ExperimentHarness().run_consistency(cfg)
        assert result.ok
        names = {row[4] for row in result.rows}
        assert "ess_flagged" in names
        assert len(result.rows) == 6
        assert all(math.isfinite(row[5]) for row in result.rows)


class TestCrashIsolation:
    """A failing cell yields error rows and the run continues."""

    def test_failed_cell_is_tagged(self, monkeypatch):
        runner = ExperimentHarness()
        original = runner._consistency_cell

        def flaky(cfg, cell):
            if cell.i == 1 and cell.r == 0:
                raise RuntimeError("boom")
            return original(cfg, cell)

        monkeypatch.setattr(runner, "_consistency_cell", flaky)
        result = runner.run_consistency(ExperimentConfig.from_dict(consistency_doc()))

        assert len(result.rows) == 40
        assert result.failed_cells == 2
        assert not result.ok
        failed = [row for row in result.rows if row[8]]
        assert len(failed) == 2 * 5
        assert all(math.isnan(row[5]) and "RuntimeError: boom" in row[8] for row in failed)
        assert any(event["kind"] == "cell_error" for event in result.events)
        assert summary_row(result, "selection_probability", n=60, alpha=0.5)[7] == 1


class TestDeterminism:
    """Same configuration and seed give the same bytes."""

    def test_rerun_and_worker_count(self):
        cfg = ExperimentConfig.from_dict(consistency_doc(alpha_grid=[1.0]))
        serial = ExperimentHarness().run(cfg, workers=1)
        parallel = ExperimentHarness().run(cfg, workers=4)
        again = ExperimentHarness().run(cfg, workers=1)
        render = ResultStorage.render_csv
        assert render(RESULT_HEADER, serial.rows) == render(RESULT_HEADER, parallel.rows)
        assert render(RESULT_HEADER, serial.rows) == render(RESULT_HEADER, again.rows)
        assert render(SUMMARY_HEADER, serial.summary) == render(SUMMARY_HEADER, parallel.summary)


class TestOccam:
    """Bayes factors of one-covariate supersets of the true model."""

    def test_statistics(self):
        cfg = ExperimentConfig.from_dict(consistency_doc(
            kind="occam", d0=1, n_grid=[40], alpha_grid=[0.5], replicates=2))
        result = harness.run_occam(cfg)
        names = sorted({row[4] for row in result.rows})
        assert names == ["log_bf_add_2", "log_bf_add_3", "log_bf_add_mean"]
        assert len(result.rows) == 2 * 3
        for r in range(2):
            cell = {row[4]: row[5] for row in result.rows if row[3] == r}
            assert cell["log_bf_add_mean"] == pytest.approx(
                (cell["log_bf_add_2"] + cell["log_bf_add_3"]) / 2)


class TestRate:
    """Predictive error under the posterior-mode model."""

    def test_interpolating_limit(self):
        cfg = ExperimentConfig.from_dict({
            "schema_version": 1,
            "name": "noiseless-rate",
            "kind": "rate",
            "truth": {"name": "single_sine", "support": [1]},
            "p": 2,
            "d0": 1,
            "sigma": 0.0,
            "n_grid": [40, 80, 160],
            "gp": {"noise_sd": 0.01, "grid_size": 16},
        })
        result = harness.run_rate(cfg)
        errors = [row[5] for row in result.rows if row[4] == "l2_error"]
        assert len(errors) == 3
        assert all(0.0 <= e < 0.1 for e in errors)
        assert all(row[7] == "{1}" for row in result.rows)
        slope = summary_row(result, "l2_error_slope")
        assert math.isnan(slope[1])
        assert math.isfinite(slope[4]) and slope[6] == 3


class TestComplexity:
    """Local complexity in the Gaussian location model."""

    @pytest.fixture(scope="class")
    def result(self):
        cfg = ExperimentConfig.from_dict({
            "schema_version": 1,
            "name": "location-complexity",
            "kind": "complexity",
            "n_grid": [100, 1000, 10000],
            "alpha_grid": [0.5],
            "master_seed": 3,
        })
        return harness.run_complexity(cfg)

    def test_mass_matches_closed_form(self, result):
        for n in (100, 1000, 10000):
            cell = {row[4]: row[5] for row in result.rows if row[1] == n}
            oracle = gaussian_location_mass(cell["epsilon"])
            assert cell["mass_oracle"] == pytest.approx(oracle)
            assert abs(cell["mass"] - oracle) <= 4 * math.sqrt(oracle * (1 - oracle) / 100_000)

    def test_critical_radius(self, result):
        for n in (100, 1000, 10000):
            cell = {row[4]: row[5] for row in result.rows if row[1] == n}
            assert cell["critical_radius"] == pytest.approx(cell["critical_radius_oracle"], rel=0.1)

    def test_log_n_growth(self, result):
        slope = summary_row(result, "n_complexity_log_n_slope")
        assert 0.2 <= slope[4] <= 0.8

    def test_alpha_one_has_no_critical_radius(self):
        cfg = ExperimentConfig.from_dict({
            "schema_version": 1, "name": "c1", "kind": "complexity",
            "n_grid": [100], "complexity": {"n_mc": 2000},
        })
        result = harness.run_complexity(cfg)
        cell = {row[4]: row[5] for row in result.rows}
        assert result.ok
        assert math.isnan(cell["critical_radius"])


class TestSpectra:
    """Analytic eigenvalues against the Gram oracle."""

    def test_se_kernel(self):
        cfg = ExperimentConfig.from_dict({
            "schema_version": 1,
            "name": "se-spectrum",
            "kind": "spectra",
            "kernels": [{"family": "se", "a": 2.0, "grid_size": 2048, "top": 9}],
        })
        result = harness.run_spectra(cfg)
        cell = {row[4]: row[5] for row in result.rows}
        assert len(result.rows) == 9 * 3 + 2
        assert cell["se(a=2)/max_rel_error"] <= 1e-2
        assert cell["se(a=2)/trace_error"] <= 1e-6
        assert all(row[1] == 2048 and math.isnan(row[2]) for row in result.rows)
        assert len(result.plots["se(a=2)_spectrum"]) == 9


# =============================================================================
# Artifacts
# =============================================================================


class TestArtifacts:
    """Files written for one run."""

    def test_outputs(self, tmp_output):
        cfg = ExperimentConfig.from_dict(consistency_doc(alpha_grid=[0.5], replicates=1))
        result = harness.run(cfg)
        out = asyncio.run(harness.write_outputs(result, str(tmp_output)))
        assert out == str(tmp_output)

        with open(tmp_output / "results.csv", newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == RESULT_HEADER
        assert len(rows) == len(result.rows) + 1

        with open(tmp_output / "summary.csv", newline="") as f:
            summary = list(csv.reader(f))
        assert summary[0] == SUMMARY_HEADER
        assert all(r[5] == "nan" for r in summary[1:])

        manifest = json.loads((tmp_output / "manifest.json").read_text())
        assert manifest["master_seed"] == 11
        assert manifest["config_digest"] == cfg.digest()
        assert manifest["rows"] == len(result.rows)
        assert manifest["failed_cells"] == 0

        assert (tmp_output / "plots" / "selection_probability_alpha0.5.txt").exists()
        assert (tmp_output / "events.jsonl").exists()


class TestAcceptanceConfigs:
    """Shipped experiment definitions stay valid."""

    @pytest.mark.parametrize("path", sorted(
        p for p in (Path(__file__).resolve().parent.parent / "configs" / "acceptance").glob("*.json")
        if not p.name.startswith("delta_")), ids=lambda p: p.stem)
    def test_parses(self, path):
        cfg = ExperimentConfig.from_dict(json.loads(path.read_text()))
        assert cfg.output_dir.startswith("results/")


# =============================================================================
# Acceptance simulations
# =============================================================================


ACCEPTANCE_DIR = Path(__file__).resolve().parent.parent / "configs" / "acceptance"


def acceptance_run(name, workers=4):
    cfg = ExperimentConfig.from_dict(json.loads((ACCEPTANCE_DIR / f"{name}.json").read_text()))
    result = harness.run(cfg, workers)
    assert result.ok
    return cfg, result


def trend(result, statistic, cfg, alpha):
    """(mean, se) per n in grid order"""
    rows = [summary_row(result, statistic, n=n, alpha=alpha) for n in cfg.n_grid]
    return [(row[4], row[5]) for row in rows]


def never_drops(points, slack=2.0):
    """Each mean is at least the previous one minus slack combined standard errors"""
    return all(b >= a - slack * math.hypot(se_a, se_b)
               for (a, se_a), (b, se_b) in zip(points, points[1:]))


@pytest.mark.slow
class TestAcceptanceRuns:
    """Shipped experiment definitions meet their targets."""

    def test_gpvs_consistency(self):
        cfg, result = acceptance_run("gpvs_consistency")
        for alpha in cfg.alpha_grid:
            points = trend(result, "selection_probability", cfg, alpha)
            assert never_drops(points)
            assert points[-1][0] >= 0.8

    def test_gpvs_occam(self):
        cfg, result = acceptance_run("gpvs_occam")
        for alpha in cfg.alpha_grid:
            points = trend(result, "log_bf_add_3", cfg, alpha)
            assert points[-1][0] < 0
            assert never_drops([(-mean, se) for mean, se in points])
            assert points[-1][0] < points[0][0]

    def test_gpvs_mcmc_matches_enumeration(self):
        _, result = acceptance_run("gpvs_mcmc_vs_enumeration")
        tv = [row[5] for row in result.rows if row[4] == "tv_to_exact"]
        assert len(tv) == 3
        assert max(tv) <= 0.05

    def test_drvs_consistency(self):
        cfg, result = acceptance_run("drvs_consistency")
        points = trend(result, "selection_probability", cfg, 1.0)
        assert never_drops(points)
        assert points[-1][0] >= 0.6
        flags = [row[5] for row in result.rows if row[4] == "ess_flagged"]
        assert len(flags) == len(cfg.n_grid) * cfg.replicates
        assert sum(1 for flag in flags if flag == 0.0) >= 0.8 * len(flags)
