"""
A-priori constants for the averaged state equation and validated lower bounds.

All constants are closed-form in the control bounds, the source norm and a few
norms of discrete functions evaluated on the FEM grid. The quadratic error
term c_quad * h^2 turns the optimum of the fully averaged relaxation into a
lower bound on the continuous control problem.
"""

import logging
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from mccpde.errors import CoercivityLost, SpecMismatch
from mccpde.fem1d import (
    PI2,
    PdeProblem,
    solve_state,
    solve_state_avg,
    source_l2_norm,
    tracking_objective,
)
from mccpde.grid import (
    GAUSS_POINTS,
    GAUSS_WEIGHTS,
    CellFunction,
    NodalFunction,
    Partition,
    gauss_nodes,
    project_avg,
    transfer,
    tv,
)
from mccpde.relaxation import Envelope

logger = logging.getLogger(__name__)

Variant = Literal["c1", "c2"]


class EmbeddingBounds(BaseModel):
    """Bounds on |u|_{H^1_0} and ||u||_{L^inf} for every admissible control."""

    h10: float
    linf: float


class ErrorConstants(BaseModel):
    """Constants of the h^{3/2} and h^2 error estimates for one control."""

    C32a: float
    C32b: float
    C2: float


class Constants(BaseModel):
    """Full constants report for one instance and one feasible control."""

    model_config = ConfigDict(frozen=True)

    w_lo: float
    w_hi: float
    f_norm: float
    c1: float
    c2: float
    h10: float
    linf: float
    L_S: float
    L_Sprime: float
    kappa: float
    C32a: float
    C32b: float
    C2: float
    L_u: float
    L_w: float = 0.0
    j0: float = Field(..., ge=0)
    primal_value: float
    tv_bound: float
    d_u_l2: float
    d_f_l1: float
    c_quad: float


class ValidatedBound(BaseModel):
    """Relaxation optimum minus the quadratic error term."""

    m_relax: float
    c_quad: float
    h: float
    value: float

    @property
    def beats_trivial(self) -> bool:
        """True if the bound improves on the trivial bound 0."""
        return self.value > 0.0


def c1(w_lo: float) -> float:
    """Coercivity constant 1 + w_lo / pi^2 of the pointwise operator."""
    return 1.0 + w_lo / PI2


def c2(w_lo: float, w_hi: float) -> float:
    """Coercivity constant 1 - max|w| / pi^2 of the averaged operator."""
    return 1.0 - max(abs(w_lo), abs(w_hi)) / PI2


def _positive(name: str, value: float) -> float:
    if value <= 0.0:
        raise CoercivityLost(
            f"{name} = {value:.6g} is not positive; the control bounds are too wide"
        )
    return value


def embedding_bounds(
    w_lo: float, w_hi: float, f_norm: float, variant: Variant = "c2"
) -> EmbeddingBounds:
    """
    A-priori state bounds |u|_{H^1_0} <= ||f|| / c and ||u||_inf <= ||f|| / (2c).

    Args:
        w_lo: Lower control bound
        w_hi: Upper control bound
        f_norm: L2 norm of the source
        variant: "c1" for the pointwise state equation, "c2" for the averaged one

    Raises:
        CoercivityLost: If the selected constant is not positive
    """
    c = _positive(variant, c1(w_lo) if variant == "c1" else c2(w_lo, w_hi))
    return EmbeddingBounds(h10=f_norm / c, linf=f_norm / (2.0 * c))


def derivative_constants(w_lo: float, w_hi: float, f_norm: float) -> tuple[float, float, float]:
    """Lipschitz constants L_S, L_S' and the second-derivative bound kappa."""
    k2 = _positive("c2", c2(w_lo, w_hi))
    L_S = f_norm / (4.0 * k2**2)
    L_Sprime = abs(w_hi - w_lo) / (2.0 * k2) * (L_S + f_norm / (np.pi * k2**2))
    kappa = f_norm / (2.0 * np.pi * k2**3)
    return L_S, L_Sprime, kappa


def _c2_formula(
    w_abs_max: float, k1: float, k2: float, f_norm: float, tv_value: float, residual_l1: float
) -> float:
    return (
        4.0 * PI2 * w_abs_max * f_norm
        + tv_value * residual_l1
        + (k1 + w_abs_max / np.pi) * tv_value * f_norm
    ) / (4.0 * k1 * k2)


def _source_at(prob: PdeProblem, points: np.ndarray) -> np.ndarray:
    """Source sampled at Gauss points of the FEM grid, shape (cells, 3)."""
    f = prob.f
    if isinstance(f, CellFunction):
        cells = transfer(f, prob.fem_grid).values
        return np.repeat(cells[:, None], points.shape[1], axis=1)
    if callable(f):
        return np.broadcast_to(np.asarray(f(points), dtype=float), points.shape)
    return np.full(points.shape, float(f))


def _nodal_at(u: NodalFunction) -> np.ndarray:
    v = u.values
    return v[:-1, None] * (1.0 - GAUSS_POINTS) + v[1:, None] * GAUSS_POINTS


def _coarse_at(values: np.ndarray, fem: Partition, coarse: Partition) -> np.ndarray:
    ratio = coarse.ratio_to(fem)
    return np.repeat(values, ratio)[:, None] * np.ones(GAUSS_POINTS.size)


def _integrate(samples: np.ndarray, fem: Partition) -> float:
    return float(fem.h * np.sum(samples @ GAUSS_WEIGHTS))


def error_constants(
    prob: PdeProblem,
    w: CellFunction,
    u_h: NodalFunction,
    coarse: Optional[Partition] = None,
) -> ErrorConstants:
    """
    Evaluate C_{3/2}^a, C_{3/2}^b and C_2 for control ``w`` and averaged state ``u_h``.

    The residual ||f - (P_h u_h)(P_h w)||_{L^1} is integrated on the FEM grid
    with averages taken on ``coarse`` (the control grid by default).
    """
    coarse = coarse or prob.control_grid
    fem = prob.fem_grid
    k1 = _positive("c1", c1(prob.w_lo))
    k2 = _positive("c2", c2(prob.w_lo, prob.w_hi))
    f_norm = source_l2_norm(prob)
    tv_value = tv(w)

    ubar = project_avg(u_h, coarse).values
    wbar = transfer(w, coarse).values
    points = gauss_nodes(fem)
    residual = np.abs(_source_at(prob, points) - _coarse_at(ubar * wbar, fem, coarse))
    residual_l1 = _integrate(residual, fem)

    spread = abs(prob.w_hi - prob.w_lo)
    C32a = np.pi * np.sqrt(spread * tv_value) * f_norm / (k1 * k2)
    C32b = PI2 * prob.w_abs_max * f_norm / (k1 * k2)
    C2 = _c2_formula(prob.w_abs_max, k1, k2, f_norm, tv_value, residual_l1)
    return ErrorConstants(C32a=float(C32a), C32b=float(C32b), C2=float(C2))


def tv_bound(primal_value: float, j0: float, alpha: float) -> float:
    """Upper bound (j(u) + alpha TV(w) - j0) / alpha on the TV of an optimal control."""
    if alpha <= 0.0:
        raise SpecMismatch("The TV bound needs a positive regularization weight")
    return max(primal_value - j0, 0.0) / alpha


def primal_objective(prob: PdeProblem, w: CellFunction, u_d: NodalFunction, alpha: float) -> float:
    """Nonsmooth objective of ``w`` under the pointwise state equation."""
    return tracking_objective(solve_state(prob, w), u_d) + alpha * tv(w)


def envelope_residuals(
    prob: PdeProblem, env: Envelope, u_d: NodalFunction
) -> tuple[float, float]:
    """
    Norms ||d_u||_{L^2} and ||d_f||_{L^1} of the envelope distance functions.

    d_u = max(|u_hi - u_d|, |u_d - u_lo|) with cellwise bounds, and d_f is the
    largest |f - u w| over the corners of the cell box [u_lo, u_hi] x [w_lo, w_hi].
    """
    fem = prob.fem_grid
    points = gauss_nodes(fem)
    lo = _coarse_at(env.u_lo.values, fem, env.coarse)
    hi = _coarse_at(env.u_hi.values, fem, env.coarse)
    target = _nodal_at(u_d)
    d_u = np.maximum(np.abs(hi - target), np.abs(target - lo))

    f = _source_at(prob, points)
    corners = [u * w for u in (lo, hi) for w in (prob.w_lo, prob.w_hi)]
    d_f = np.max([np.abs(f - c) for c in corners], axis=0)
    return float(np.sqrt(_integrate(d_u**2, fem))), _integrate(d_f, fem)


def c_quad(
    prob: PdeProblem,
    w_hat: CellFunction,
    j0: float,
    env: Envelope,
    u_d: NodalFunction,
    alpha: float,
    primal_value: Optional[float] = None,
) -> float:
    """
    Constant of the quadratic error term of the validated lower bound.

    Substitutes ||d_f||_{L^1} for the residual norm and the TV bound from the
    feasible control ``w_hat`` for the TV of the unknown optimum in C_2, and
    multiplies by ||d_u||_{L^2}.

    Args:
        prob: Problem data
        w_hat: Feasible control
        j0: Lower bound on the optimal tracking term (0 is always valid)
        env: Envelope containing every averaged state
        u_d: Tracking target on the FEM grid
        alpha: TV weight
        primal_value: Known objective of ``w_hat``; computed if omitted

    Returns:
        c_quad >= 0
    """
    return _c_quad_parts(prob, w_hat, j0, env, u_d, alpha, primal_value)[0]


def _c_quad_parts(
    prob: PdeProblem,
    w_hat: CellFunction,
    j0: float,
    env: Envelope,
    u_d: NodalFunction,
    alpha: float,
    primal_value: Optional[float],
) -> tuple[float, float, float, float, float]:
    k1 = _positive("c1", c1(prob.w_lo))
    k2 = _positive("c2", c2(prob.w_lo, prob.w_hi))
    if primal_value is None:
        primal_value = primal_objective(prob, w_hat, u_d, alpha)
    tv_max = tv_bound(primal_value, j0, alpha)
    d_u_l2, d_f_l1 = envelope_residuals(prob, env, u_d)
    C2 = _c2_formula(prob.w_abs_max, k1, k2, source_l2_norm(prob), tv_max, d_f_l1)
    value = d_u_l2 * C2
    logger.debug(
        "c_quad = %.6e (||d_u|| = %.6e, ||d_f||_1 = %.6e, TV bound = %.6e)",
        value, d_u_l2, d_f_l1, tv_max,
    )
    return value, primal_value, tv_max, d_u_l2, d_f_l1


def validated_lower_bound(m_relax: float, c_quad: float, h: float) -> ValidatedBound:
    """Lower bound m_relax - c_quad h^2 on the continuous problem."""
    value = m_relax - c_quad * h * h
    return ValidatedBound(m_relax=m_relax, c_quad=c_quad, h=h, value=value)


def constants_for(
    prob: PdeProblem,
    w_hat: CellFunction,
    u_d: NodalFunction,
    alpha: float,
    env: Envelope,
    j0: float = 0.0,
    primal_value: Optional[float] = None,
) -> Constants:
    """
    Evaluate every constant for one instance.

    The error constants use ``w_hat`` and its averaged state on the envelope grid.

    Raises:
        CoercivityLost: If c1 or c2 is not positive
    """
    f_norm = source_l2_norm(prob)
    k1 = _positive("c1", c1(prob.w_lo))
    k2 = _positive("c2", c2(prob.w_lo, prob.w_hi))
    bounds = embedding_bounds(prob.w_lo, prob.w_hi, f_norm, "c2")
    L_S, L_Sprime, kappa = derivative_constants(prob.w_lo, prob.w_hi, f_norm)

    u_h = solve_state_avg(prob, w_hat, env.coarse)
    errors = error_constants(prob, w_hat, u_h, env.coarse)
    value, primal_value, tv_max, d_u_l2, d_f_l1 = _c_quad_parts(
        prob, w_hat, j0, env, u_d, alpha, primal_value
    )
    return Constants(
        w_lo=prob.w_lo,
        w_hi=prob.w_hi,
        f_norm=f_norm,
        c1=k1,
        c2=k2,
        h10=bounds.h10,
        linf=bounds.linf,
        L_S=L_S,
        L_Sprime=L_Sprime,
        kappa=kappa,
        C32a=errors.C32a,
        C32b=errors.C32b,
        C2=errors.C2,
        L_u=d_u_l2,
        j0=j0,
        primal_value=primal_value,
        tv_bound=tv_max,
        d_u_l2=d_u_l2,
        d_f_l1=d_f_l1,
        c_quad=value,
    )
