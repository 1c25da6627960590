"""Tests for a-priori constants and validated lower bounds."""

from pathlib import Path

import numpy as np
import pytest

from mccpde.certificates import (
    c1,
    c2,
    c_quad,
    constants_for,
    derivative_constants,
    embedding_bounds,
    envelope_residuals,
    error_constants,
    primal_objective,
    tv_bound,
    validated_lower_bound,
)
from mccpde.errors import CoercivityLost, SpecMismatch
from mccpde.fem1d import PdeProblem, solve_state_avg, state_derivative, state_second_derivative
from mccpde.grid import CellFunction, NodalFunction, Partition
from mccpde.instances import build_problem, get_instance
from mccpde.pipeline import load_config
from mccpde.relaxation import Envelope

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


class TestCoercivity:
    """Tests for c1, c2 and the embedding bounds."""

    def test_symmetric_bounds(self) -> None:
        """Test c1 = c2 = 1 - 4 / pi^2 for w in [-4, 4]."""
        assert c1(-4.0) == pytest.approx(0.594715, abs=1e-6)
        assert c2(-4.0, 4.0) == pytest.approx(0.594715, abs=1e-6)

    def test_nonnegative_controls(self) -> None:
        """Test that c1 exceeds one when w >= 0."""
        assert c1(0.5) > 1.0
        assert c2(0.5, 2.0) == pytest.approx(1.0 - 2.0 / np.pi**2)

    def test_embedding_bounds(self) -> None:
        """Test ||u||_inf <= 5.0444 for f = 6 and |w| <= 4."""
        bounds = embedding_bounds(-4.0, 4.0, 6.0)
        assert bounds.linf == pytest.approx(5.0444, abs=1e-4)
        assert bounds.h10 == pytest.approx(2.0 * bounds.linf)

    def test_pointwise_variant(self) -> None:
        """Test the c1 variant with a nonnegative lower bound."""
        assert embedding_bounds(0.0, 8.0, 6.0, "c1").linf == pytest.approx(3.0)

    def test_coercivity_lost(self) -> None:
        """Test that |w| >= pi^2 raises."""
        with pytest.raises(CoercivityLost):
            embedding_bounds(-1.0, 10.0, 6.0)
        with pytest.raises(CoercivityLost):
            derivative_constants(-10.0, 1.0, 6.0)

    def test_derivative_constants(self) -> None:
        """Test L_S = ||f|| / (4 c2^2) and kappa = ||f|| / (2 pi c2^3)."""
        k2 = c2(-4.0, 4.0)
        L_S, L_Sprime, kappa = derivative_constants(-4.0, 4.0, 6.0)
        assert L_S == pytest.approx(6.0 / (4.0 * k2**2))
        assert kappa == pytest.approx(6.0 / (2.0 * np.pi * k2**3))
        assert L_Sprime > 0.0


class TestErrorConstants:
    """Tests for the h^{3/2} and h^2 constants."""

    def test_constant_control_has_no_tv_term(
        self, problem: PdeProblem, coarse: Partition
    ) -> None:
        """Test that C_{3/2}^a vanishes when TV(w) = 0."""
        w = CellFunction.constant(coarse, 2.0)
        u_h = solve_state_avg(problem, w, coarse)
        constants = error_constants(problem, w, u_h)
        assert constants.C32a == 0.0
        assert constants.C32b > 0.0
        assert constants.C2 > 0.0

    def test_tv_increases_constants(
        self, problem: PdeProblem, coarse: Partition, sample_control: CellFunction
    ) -> None:
        """Test that a rougher control gives larger constants."""
        flat = CellFunction.constant(coarse, 1.0)
        rough = error_constants(
            problem, sample_control, solve_state_avg(problem, sample_control, coarse)
        )
        smooth = error_constants(problem, flat, solve_state_avg(problem, flat, coarse))
        assert rough.C32a > smooth.C32a
        assert rough.C32b == pytest.approx(smooth.C32b)


class TestTvBound:
    """Tests for the TV bound of optimal controls."""

    def test_value(self) -> None:
        """Test (primal - j0) / alpha."""
        assert tv_bound(1.0, 0.2, 0.5) == pytest.approx(1.6)

    def test_clamped_at_zero(self) -> None:
        """Test that j0 above the primal value gives zero."""
        assert tv_bound(0.1, 0.5, 1.0) == 0.0

    def test_needs_positive_alpha(self) -> None:
        """Test that alpha = 0 is rejected."""
        with pytest.raises(SpecMismatch):
            tv_bound(1.0, 0.0, 0.0)


class TestValidatedBound:
    """Tests for m - c_quad h^2."""

    def test_coarse_grid_gives_trivial_bound(self) -> None:
        """Test a bound that falls below zero."""
        bound = validated_lower_bound(0.08, 100.0, 1.0 / 32.0)
        assert bound.value == pytest.approx(0.08 - 100.0 / 1024.0)
        assert not bound.beats_trivial

    def test_fine_grid_beats_trivial(self) -> None:
        """Test a bound that improves on zero."""
        bound = validated_lower_bound(0.08, 100.0, 1.0 / 1024.0)
        assert bound.beats_trivial
        assert bound.value < bound.m_relax


class TestQuadraticConstant:
    """Tests for c_quad and the full constants report."""

    def test_residuals_nonnegative(
        self, problem: PdeProblem, coarse: Partition, target: NodalFunction, u_bound: float
    ) -> None:
        """Test the envelope distance norms."""
        env = Envelope.uniform(coarse, u_bound, problem.w_bounds)
        d_u, d_f = envelope_residuals(problem, env, target)
        assert d_u > 0.0
        assert d_f > 0.0

    def test_tighter_envelope_shrinks_c_quad(
        self,
        problem: PdeProblem,
        coarse: Partition,
        target: NodalFunction,
        sample_control: CellFunction,
        u_bound: float,
    ) -> None:
        """Test c_quad(tightest) <= c_quad(conservative)."""
        loose = Envelope.uniform(coarse, u_bound, problem.w_bounds)
        tight = Envelope.tightest(problem, coarse)
        c_loose = c_quad(problem, sample_control, 0.0, loose, target, 1e-3)
        c_tight = c_quad(problem, sample_control, 0.0, tight, target, 1e-3)
        assert 0.0 <= c_tight <= c_loose

    def test_j0_reduces_c_quad(
        self,
        problem: PdeProblem,
        coarse: Partition,
        target: NodalFunction,
        sample_control: CellFunction,
        u_bound: float,
    ) -> None:
        """Test that a positive j0 lowers the TV bound and c_quad."""
        env = Envelope.uniform(coarse, u_bound, problem.w_bounds)
        primal = primal_objective(problem, sample_control, target, 1e-3)
        without = c_quad(problem, sample_control, 0.0, env, target, 1e-3, primal)
        with_j0 = c_quad(problem, sample_control, 0.5 * primal, env, target, 1e-3, primal)
        assert with_j0 < without

    def test_constants_report(
        self,
        problem: PdeProblem,
        coarse: Partition,
        target: NodalFunction,
        sample_control: CellFunction,
        u_bound: float,
    ) -> None:
        """Test that the report agrees with the individual functions."""
        env = Envelope.uniform(coarse, u_bound, problem.w_bounds)
        report = constants_for(problem, sample_control, target, 1e-3, env)
        assert report.c1 == pytest.approx(0.594715, abs=1e-6)
        assert report.linf == pytest.approx(5.0444, abs=1e-4)
        assert report.f_norm == pytest.approx(6.0)
        assert report.j0 == 0.0
        assert report.primal_value == pytest.approx(
            primal_objective(problem, sample_control, target, 1e-3)
        )
        assert report.tv_bound == pytest.approx(report.primal_value / 1e-3)
        assert report.c_quad == pytest.approx(
            c_quad(problem, sample_control, 0.0, env, target, 1e-3)
        )


class TestSampledDerivativeBounds:
    """Sampled checks of L_S, L_S' and kappa on the averaged state equation."""

    @staticmethod
    def _control(coarse: Partition, rng: np.random.Generator) -> CellFunction:
        return CellFunction(partition=coarse, values=rng.uniform(-4.0, 4.0, coarse.n_cells))

    def test_state_lipschitz(
        self, problem: PdeProblem, coarse: Partition, rng: np.random.Generator
    ) -> None:
        """Test |S(w1) - S(w2)|_{H^1_0} <= L_S ||w1 - w2||_{L^1}."""
        L_S, _, _ = derivative_constants(-4.0, 4.0, 6.0)
        for _ in range(20):
            w1, w2 = self._control(coarse, rng), self._control(coarse, rng)
            u1 = solve_state_avg(problem, w1, coarse)
            u2 = solve_state_avg(problem, w2, coarse)
            diff = NodalFunction(partition=u1.partition, values=u1.values - u2.values)
            step = w1.with_values(w1.values - w2.values).l1_norm()
            assert diff.h1_seminorm() <= L_S * step
            assert diff.l2_norm() <= L_S * step / np.pi

    def test_derivative_lipschitz(
        self, problem: PdeProblem, coarse: Partition, rng: np.random.Generator
    ) -> None:
        """Test |S'(w1)s - S'(w2)s|_{H^1_0} <= L_S' ||w1 - w2||_{L^1} for feasible steps s."""
        _, L_Sprime, _ = derivative_constants(-4.0, 4.0, 6.0)
        for _ in range(20):
            w1, w2, w3 = (self._control(coarse, rng) for _ in range(3))
            s = w1.with_values(w3.values - w1.values)
            q1 = state_derivative(problem, w1, s, coarse)
            q2 = state_derivative(problem, w2, s, coarse)
            diff = NodalFunction(partition=q1.partition, values=q1.values - q2.values)
            step = w1.with_values(w1.values - w2.values).l1_norm()
            assert diff.h1_seminorm() <= L_Sprime * step

    def test_second_derivative_bound(
        self, problem: PdeProblem, coarse: Partition, rng: np.random.Generator
    ) -> None:
        """Test ||S''(w)[psi, phi]||_{L^2} <= kappa ||psi||_{L^1} ||phi||_{L^1}."""
        _, _, kappa = derivative_constants(-4.0, 4.0, 6.0)
        for _ in range(20):
            w, a, b = (self._control(coarse, rng) for _ in range(3))
            psi = w.with_values(a.values - w.values)
            phi = w.with_values(b.values - w.values)
            xi = state_second_derivative(problem, w, psi, phi, coarse)
            assert xi.l2_norm() <= kappa * psi.l1_norm() * phi.l1_norm()

    def test_c_quad_grows_with_control_bounds(
        self, fem: Partition, coarse: Partition, target: NodalFunction
    ) -> None:
        """Test that widening [w_lo, w_hi] never decreases c_quad."""
        values = []
        for bounds in [(0.0, 1.0), (-1.0, 1.0), (-1.0, 2.0), (-2.0, 2.0), (-3.0, 3.0), (-4.0, 4.0)]:
            prob = PdeProblem(f=6.0, w_bounds=bounds, fem_grid=fem, control_grid=coarse)
            linf = embedding_bounds(*bounds, 6.0).linf
            env = Envelope.uniform(coarse, linf, bounds)
            w_hat = CellFunction.constant(coarse, 0.0)
            values.append(c_quad(prob, w_hat, 0.0, env, target, 1e-3, primal_value=0.05))
        assert all(b >= a for a, b in zip(values, values[1:]))


class TestReferenceConstants:
    """Constants of the bundled N = 2048 instance."""

    @pytest.fixture(scope="class")
    def paper(self) -> tuple[PdeProblem, NodalFunction, float]:
        """Return the problem, target and TV weight of the bundled config."""
        config = load_config(CONFIGS / "paper_1d.toml")
        prob, u_d = build_problem(config)
        return prob, u_d, config.alpha

    def test_conservative_c_quad(self, paper: tuple[PdeProblem, NodalFunction, float]) -> None:
        """Test j0 = 0 on the uniform envelope against the known conservative constant."""
        prob, u_d, alpha = paper
        ref = get_instance("benchmark_1d").reference
        linf = embedding_bounds(prob.w_lo, prob.w_hi, 6.0).linf
        assert linf == pytest.approx(ref["u_bound"], abs=1e-4)
        env = Envelope.uniform(prob.fem_grid, linf, prob.w_bounds)
        w_hat = CellFunction.constant(prob.control_grid, 0.0)
        value = c_quad(prob, w_hat, 0.0, env, u_d, alpha, primal_value=ref["ub_integer"])
        assert value == pytest.approx(ref["c_quad_conservative"], rel=1e-2)

    def test_tight_c_quad(self, paper: tuple[PdeProblem, NodalFunction, float]) -> None:
        """Test the tightest envelope with j0 from the alpha = 0 relaxation."""
        prob, u_d, alpha = paper
        ref = get_instance("benchmark_1d").reference
        linf = embedding_bounds(prob.w_lo, prob.w_hi, 6.0).linf
        w_hat = CellFunction.constant(prob.control_grid, 0.0)
        loose = c_quad(
            prob, w_hat, 0.0, Envelope.uniform(prob.fem_grid, linf, prob.w_bounds), u_d, alpha,
            primal_value=ref["ub_integer"],
        )
        tight = c_quad(
            prob, w_hat, ref["mcc_alpha0"], Envelope.tightest(prob, prob.fem_grid), u_d, alpha,
            primal_value=ref["ub_integer"],
        )
        assert tight >= ref["c_quad_tight"]
        assert loose / tight > 30.0

    def test_validated_bounds(self) -> None:
        """Test m - c_quad h^2 with the known constants."""
        ref = get_instance("benchmark_1d").reference
        tight = validated_lower_bound(ref["mcc_tightest"], ref["c_quad_tight"], 2.0**-9)
        assert tight.value == pytest.approx(7.9362e-2, rel=1e-4)
        loose = validated_lower_bound(
            ref["mcc_conservative"], ref["c_quad_conservative"], 2.0**-10
        )
        assert loose.value == pytest.approx(1.5219e-2, rel=1e-3)
