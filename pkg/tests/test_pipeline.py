"""Tests for config loading, experiment runs and the invariant suite."""

import csv
import json
from pathlib import Path

import pytest

from mccpde.errors import ConfigError
from mccpde.instances import BENCHMARK_TARGET, build_problem, get_instance
from mccpde.models import ExperimentConfig, Mode, ObbtSettings, OracleSettings
from mccpde.pipeline import (
    TABLE_LEVELS,
    TABLE_VALIDATED,
    computed_levels,
    conservative_bound,
    load_config,
    run_experiment,
    run_invariant_suite,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    """Return every bounding stage on a 32-cell grid."""
    return ExperimentConfig(
        name="tiny",
        reference="benchmark_1d",
        fem_n=32,
        coarse_levels=[4, 8],
        u_d_spec=BENCHMARK_TARGET,
        modes={"mcc", "mcch_sweep", "obbt", "certificates", "ub_continuous", "ub_integer"},
        obbt=ObbtSettings(max_sweeps=3),
        ub_cells=8,
    )


def read_csv(path: Path) -> list[list[str]]:
    with path.open() as fh:
        return list(csv.reader(fh))


class TestLoadConfig:
    """Tests for reading TOML configs."""

    def test_bundled_configs(self) -> None:
        """Test that the shipped configs validate."""
        paper = load_config(CONFIGS / "paper_1d.toml")
        assert paper.name == "paper_1d"
        assert paper.fem_n == 2048
        assert paper.coarse_levels[0] == 8
        assert Mode.OBBT in paper.modes
        oracle = load_config(CONFIGS / "toy_oracle.toml")
        assert oracle.modes == {Mode.ORACLE}

    def test_missing_file(self, tmp_path: Path) -> None:
        """Test the not-found code."""
        with pytest.raises(ConfigError) as exc_info:
            load_config(tmp_path / "absent.toml")
        assert exc_info.value.code == "CONFIG_NOT_FOUND"

    def test_bad_toml(self, tmp_path: Path) -> None:
        """Test a syntax error."""
        path = tmp_path / "bad.toml"
        path.write_text("name = \n")
        with pytest.raises(ConfigError) as exc_info:
            load_config(path)
        assert exc_info.value.code == "CONFIG_ERROR"

    def test_invalid_values(self, tmp_path: Path) -> None:
        """Test that validation errors are wrapped."""
        path = tmp_path / "invalid.toml"
        path.write_text('modes = ["mcc"]\nfem_n = 64\ncoarse_levels = [8, 24]\n')
        with pytest.raises(ConfigError, match="do not divide"):
            load_config(path)


class TestHelpers:
    """Tests for level selection and the a-priori bound."""

    def test_long_running_levels(self) -> None:
        """Test that large levels need the long-running flag."""
        config = ExperimentConfig(modes={"mcch_sweep"}, fem_n=256, coarse_levels=[8, 64, 128])
        assert computed_levels(config, long_running=False) == [8]
        assert computed_levels(config, long_running=True) == [8, 64, 128]

    def test_conservative_bound(self) -> None:
        """Test the derived and the configured bound."""
        config = ExperimentConfig(modes={"mcc"}, fem_n=32, coarse_levels=[4])
        prob, _ = build_problem(config)
        assert conservative_bound(config, prob) == pytest.approx(5.0444, abs=1e-4)
        configured = config.model_copy(update={"u_bound": 2.0})
        assert conservative_bound(configured, prob) == 2.0


class TestRunExperiment:
    """Tests for a complete small run."""

    def test_bounds_and_checks(self, tiny_config: ExperimentConfig, tmp_path: Path) -> None:
        """Test emitted bounds, their ordering and the consistency checks."""
        summary = run_experiment(tiny_config, tmp_path)
        lb, ub = summary.lower_bounds, summary.upper_bounds
        assert summary.passed
        assert lb["mcc_alpha0"] <= lb["mcc_conservative"] + 1e-9
        assert lb["mcc_conservative"] <= lb["mcc_tightest"] + 1e-9
        assert lb["mcc_tightest"] <= ub["ub_continuous"]
        for n in (4, 8):
            assert lb[f"mcchh_{n}"] <= lb[f"mcchh_obbt_{n}"] + 1e-9
        assert "nlp_vs_mcc_tightest" in summary.gaps
        assert summary.reference["u_bound"] == pytest.approx(5.0444)
        assert set(summary.timings) == {"mcc", "levels", "upper_bounds", "certificates"}

    def test_files(self, tiny_config: ExperimentConfig, tmp_path: Path) -> None:
        """Test the output files and their headers."""
        summary = run_experiment(tiny_config, tmp_path)
        names = {Path(f).name for f in summary.files}
        assert names >= {
            "tiny_relaxations.csv",
            "tiny_levels.csv",
            "tiny_obbt_4.csv",
            "tiny_obbt_8.csv",
            "tiny_upper_bounds.csv",
            "tiny_constants.json",
            "tiny_validated.csv",
            "tiny_envelope_8.svg",
            "tiny_controls.svg",
            "tiny_summary.json",
        }
        assert all(Path(f).exists() for f in summary.files)
        assert read_csv(tmp_path / "tiny_levels.csv")[0] == TABLE_LEVELS
        assert read_csv(tmp_path / "tiny_validated.csv")[0] == TABLE_VALIDATED
        constants = json.loads((tmp_path / "tiny_constants.json").read_text())
        assert constants["tight"]["c_quad"] <= constants["conservative"]["c_quad"]
        saved = json.loads((tmp_path / "tiny_summary.json").read_text())
        assert saved["lower_bounds"] == summary.lower_bounds

    def test_skipped_levels_are_extrapolated(
        self, tiny_config: ExperimentConfig, tmp_path: Path
    ) -> None:
        """Test that an unsolved level reuses the finest solved one."""
        config = tiny_config.model_copy(update={"long_running_level": 8})
        summary = run_experiment(config, tmp_path)
        solved, skipped = summary.levels
        assert solved.computed
        assert not skipped.computed
        assert skipped.m_no_obbt is None
        row = summary.validated[1]
        assert row.extrapolated
        assert row.m_obbt == solved.m_obbt
        assert "mcchh_8" not in summary.lower_bounds

    def test_oracle_mode(self, tmp_path: Path) -> None:
        """Test the enumeration stage on its own."""
        config = ExperimentConfig(
            name="toy",
            fem_n=16,
            coarse_levels=[2],
            modes={"oracle"},
            oracle=OracleSettings(n_cells=2, values=[-1, 0, 1], fem_n=16, n_instances=2),
            obbt=ObbtSettings(max_sweeps=3),
        )
        summary = run_experiment(config, tmp_path)
        assert summary.passed
        assert [c.name for c in summary.checks] == ["bound validity (oracle)"]
        rows = read_csv(tmp_path / "toy_oracle.csv")
        assert len(rows) == 3
        assert len(read_csv(tmp_path / "toy_oracle_table.csv")) == 10
        assert not (tmp_path / "toy_states.svg").exists()


class TestInvariantSuite:
    """Tests for the fast property checks."""

    def test_all_pass(self) -> None:
        """Test every check on a small grid."""
        checks = run_invariant_suite(fem_n=32)
        assert len(checks) == 6
        failed = [f"{c.name}: {c.detail}" for c in checks if not c.passed]
        assert not failed

    def test_grid_must_divide_by_eight(self) -> None:
        """Test the divisibility requirement."""
        with pytest.raises(ConfigError):
            run_invariant_suite(fem_n=36)


@pytest.fixture(scope="module")
def paper_config() -> ExperimentConfig:
    """Return the bundled N = 2048 experiment."""
    return load_config(CONFIGS / "paper_1d.toml")


@pytest.fixture(scope="module")
def reference() -> dict[str, float]:
    """Return the known values of the bundled instance."""
    return get_instance("benchmark_1d").reference


@pytest.mark.slow
class TestReferenceValues:
    """Full-scale reproductions of the known values at N = 2048."""

    def test_pointwise_relaxations(
        self, paper_config: ExperimentConfig, reference: dict[str, float], tmp_path: Path
    ) -> None:
        """Test the three pointwise bounds within 1% and their ordering."""
        config = paper_config.model_copy(update={"modes": {Mode.MCC, Mode.UB_CONTINUOUS}})
        summary = run_experiment(config, tmp_path)
        lb = summary.lower_bounds
        for key in ("mcc_conservative", "mcc_alpha0", "mcc_tightest"):
            assert lb[key] == pytest.approx(reference[key], rel=1e-2), key
        assert lb["mcc_alpha0"] <= lb["mcc_conservative"] <= lb["mcc_tightest"]
        assert lb["mcc_tightest"] <= summary.upper_bounds["ub_continuous"]
        assert summary.passed

    def test_obbt_levels(
        self, paper_config: ExperimentConfig, reference: dict[str, float], tmp_path: Path
    ) -> None:
        """Test the fully averaged bounds on 8, 16 and 32 cells before and after tightening."""
        config = paper_config.model_copy(
            update={"modes": {Mode.MCCH_SWEEP, Mode.OBBT}, "coarse_levels": [8, 16, 32]}
        )
        summary = run_experiment(config, tmp_path)
        lb = summary.lower_bounds
        for n in (8, 16, 32):
            assert lb[f"mcchh_{n}"] == pytest.approx(reference[f"mcchh_{n}"], rel=1e-2)
            assert lb[f"mcchh_obbt_{n}"] == pytest.approx(
                reference[f"mcchh_obbt_{n}"], rel=5e-3
            )
