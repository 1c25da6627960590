"""Tests for bundled instances."""

import numpy as np
import pytest

from mccpde.grid import CellFunction
from mccpde.instances import build_problem, get_instance, get_supported_instances
from mccpde.models import ExperimentConfig


class TestInstances:
    """Tests for instance lookup."""

    def test_supported(self) -> None:
        """Test the bundled names."""
        assert get_supported_instances() == ["benchmark_1d", "toy"]

    def test_lookup_case_insensitive(self) -> None:
        """Test name lookup."""
        instance = get_instance("Benchmark_1D")
        assert instance is not None
        assert instance.alpha == 2.5e-4
        assert instance.reference["u_bound"] == pytest.approx(5.0444)

    def test_unknown(self) -> None:
        """Test that unknown names give None."""
        assert get_instance("unknown") is None

    def test_reference_ordering(self) -> None:
        """Test that the known lower bounds sit below the known upper bounds."""
        ref = get_instance("benchmark_1d").reference
        lower = [v for k, v in ref.items() if k.startswith("mcc")]
        assert max(lower) < ref["ub_continuous"] < ref["ub_integer"]


class TestBuildProblem:
    """Tests for turning a config into problem data."""

    def test_constant_source(self) -> None:
        """Test grids, bounds and the interpolated target."""
        config = ExperimentConfig(modes={"mcc"}, fem_n=64, coarse_levels=[8])
        prob, u_d = build_problem(config, control_cells=8)
        assert prob.f == 6.0
        assert prob.w_bounds == (-4.0, 4.0)
        assert prob.fem_grid.n_cells == 64
        assert prob.control_grid.n_cells == 8
        np.testing.assert_array_equal(u_d.values, 0.0)

    def test_control_defaults_to_fem_grid(self) -> None:
        """Test the pointwise default."""
        config = ExperimentConfig(modes={"mcc"}, fem_n=32, coarse_levels=[8])
        prob, _ = build_problem(config)
        assert prob.control_grid == prob.fem_grid

    def test_piecewise_source(self) -> None:
        """Test that a piecewise source becomes a callable."""
        config = ExperimentConfig(
            modes={"mcc"},
            fem_n=32,
            coarse_levels=[8],
            f_spec={
                "kind": "piecewise",
                "segments": [{"start": 0.0, "stop": 1.0, "coefficients": [0.0, 2.0]}],
            },
        )
        prob, _ = build_problem(config)
        assert callable(prob.f)
        assert not isinstance(prob.f, CellFunction)
        np.testing.assert_allclose(prob.f(np.array([0.25])), [0.5])
