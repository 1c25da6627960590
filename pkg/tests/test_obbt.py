"""Tests for optimization-based bound tightening."""

import csv
from pathlib import Path

import numpy as np
import pytest

from mccpde.fem1d import solve_state_avg
from mccpde.grid import CellFunction, project_avg
from mccpde.models import ObbtSettings
from mccpde.obbt import lower_bound_after_obbt, tighten, write_trace_csv
from mccpde.relaxation import RelaxationSpec
from mccpde.upper_bounds import evaluate

SETTINGS = ObbtSettings(max_sweeps=4)


@pytest.fixture(scope="module")
def controls() -> list[np.ndarray]:
    """Return a fixed set of integer controls on four cells."""
    rng = np.random.default_rng(99)
    return [rng.integers(-4, 5, size=4).astype(float) for _ in range(8)]


class TestTighten:
    """Tests for the sweep loop."""

    def test_bounds_only_shrink(self, averaged_spec: RelaxationSpec) -> None:
        """Test that tightened bounds stay inside the initial ones up to the safeguard."""
        result = tighten(averaged_spec, SETTINGS)
        env0, env = averaged_spec.env, result.env
        slack = SETTINGS.safeguard + 1e-9
        assert np.all(env.u_lo.values >= env0.u_lo.values - slack)
        assert np.all(env.u_hi.values <= env0.u_hi.values + slack)
        assert np.all(env.u_lo.values <= env.u_hi.values)
        assert np.any(env.u_hi.values < env0.u_hi.values)

    def test_trace_is_monotone(self, averaged_spec: RelaxationSpec) -> None:
        """Test that the relaxation optimum never decreases between sweeps."""
        trace = tighten(averaged_spec, SETTINGS).trace
        objectives = trace.objectives
        assert len(objectives) == len(trace.sweeps) + 1
        assert all(b >= a - 1e-9 for a, b in zip(objectives, objectives[1:]))
        assert trace.final_env is not None

    def test_events_record_every_bound(self, averaged_spec: RelaxationSpec) -> None:
        """Test one event per cell, side and sweep."""
        trace = tighten(averaged_spec, SETTINGS).trace
        n_cells = averaged_spec.env.coarse.n_cells
        assert len(trace.events) == 2 * n_cells * len(trace.sweeps)
        first = [e for e in trace.events if e.sweep == 1]
        assert [e.side for e in first] == ["lo"] * n_cells + ["hi"] * n_cells
        assert [e.cell for e in first[:n_cells]] == list(range(n_cells))
        slack = SETTINGS.safeguard + 1e-9
        for e in trace.events:
            if e.side == "lo":
                assert e.new >= e.old - slack
            else:
                assert e.new <= e.old + slack
        assert trace.total_iters > 0

    def test_safeguard_margin(self, averaged_spec: RelaxationSpec) -> None:
        """Test that every new bound is the LP value relaxed by the safeguard."""
        trace = tighten(averaged_spec, SETTINGS).trace
        for e in trace.events:
            expected = e.lp_value - SETTINGS.safeguard if e.side == "lo" else (
                e.lp_value + SETTINGS.safeguard
            )
            assert e.new == pytest.approx(expected, abs=1e-12)

    def test_fixed_point_is_kept(self, averaged_spec: RelaxationSpec) -> None:
        """Test that a converged envelope survives one more sweep without movement."""
        converged = tighten(averaged_spec, ObbtSettings(max_sweeps=50))
        assert converged.trace.sweeps[-1].max_movement <= 1e-6
        again = tighten(averaged_spec.with_env(converged.env), ObbtSettings(max_sweeps=1))
        assert len(again.trace.sweeps) == 1
        assert again.trace.sweeps[0].max_movement <= 1e-6
        np.testing.assert_allclose(again.env.u_lo.values, converged.env.u_lo.values, atol=1e-6)
        np.testing.assert_allclose(again.env.u_hi.values, converged.env.u_hi.values, atol=1e-6)

    def test_stops_on_small_movement(self, averaged_spec: RelaxationSpec) -> None:
        """Test the sweep tolerance stopping rule."""
        settings = ObbtSettings(max_sweeps=50, sweep_tol=1e-2)
        trace = tighten(averaged_spec, settings).trace
        assert trace.sweeps[-1].max_movement <= 1e-2
        assert all(s.max_movement > 1e-2 for s in trace.sweeps[:-1])

    def test_tightened_envelope_contains_states(
        self, averaged_spec: RelaxationSpec, controls: list[np.ndarray]
    ) -> None:
        """Test that cell means of averaged states stay inside the tightened bounds."""
        env = tighten(averaged_spec, SETTINGS).env
        prob, coarse = averaged_spec.prob, averaged_spec.env.coarse
        for values in controls:
            w = CellFunction(partition=coarse, values=values)
            means = project_avg(solve_state_avg(prob, w, coarse), coarse).values
            assert np.all(means >= env.u_lo.values - 1e-9)
            assert np.all(means <= env.u_hi.values + 1e-9)

    def test_parallel_pass_is_valid(
        self, averaged_spec: RelaxationSpec, controls: list[np.ndarray]
    ) -> None:
        """Test that concurrent passes also give a valid, tighter envelope."""
        settings = ObbtSettings(max_sweeps=4, parallel=True)
        result = tighten(averaged_spec, settings, threads=2)
        prob, coarse = averaged_spec.prob, averaged_spec.env.coarse
        slack = settings.safeguard + 1e-9
        assert np.all(result.env.u_hi.values <= averaged_spec.env.u_hi.values + slack)
        assert np.all(result.env.u_lo.values >= averaged_spec.env.u_lo.values - slack)
        for values in controls:
            w = CellFunction(partition=coarse, values=values)
            means = project_avg(solve_state_avg(prob, w, coarse), coarse).values
            assert np.all(means >= result.env.u_lo.values - 1e-9)
            assert np.all(means <= result.env.u_hi.values + 1e-9)


class TestLowerBoundAfterObbt:
    """Tests for the tightened lower bound."""

    def test_bound_improves_and_stays_valid(
        self, averaged_spec: RelaxationSpec, controls: list[np.ndarray]
    ) -> None:
        """Test m_before <= m <= J(w) for sampled controls."""
        outcome = lower_bound_after_obbt(averaged_spec, SETTINGS)
        assert outcome.m >= outcome.m_before - 1e-9
        assert outcome.m > outcome.m_before
        prob, coarse = averaged_spec.prob, averaged_spec.env.coarse
        for values in controls:
            w = CellFunction(partition=coarse, values=values)
            value = evaluate(prob, averaged_spec.u_d, averaged_spec.alpha, w, averaged=True)
            assert outcome.m <= value + 1e-8


class TestTraceCsv:
    """Tests for the per-bound trace file."""

    def test_header_and_rows(self, averaged_spec: RelaxationSpec, tmp_path: Path) -> None:
        """Test the fixed header and one row per event."""
        trace = tighten(averaged_spec, ObbtSettings(max_sweeps=1)).trace
        path = tmp_path / "trace.csv"
        write_trace_csv(trace, path)
        with path.open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["sweep", "side", "cell", "old", "new", "lp_value", "objective"]
        assert len(rows) == 1 + len(trace.events)
        assert float(rows[1][-1]) == pytest.approx(trace.sweeps[0].objective)
