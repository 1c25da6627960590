"""
P1 finite elements for -u'' + w u = f on (0, 1) with u(0) = u(1) = 0.

Covers the pointwise state equation, its locally averaged variant
-u'' + (P_h w)(P_h u) = f, the adjoint equation, reduced gradients and
derivatives of the averaged control-to-state map.
"""

import logging
from functools import lru_cache
from typing import Any, Callable, Optional, Union

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from mccpde.errors import IncompatibleGrids, SingularSystem
from mccpde.grid import (
    GAUSS_POINTS,
    GAUSS_WEIGHTS,
    CellFunction,
    NodalFunction,
    Partition,
    averaging_matrix,
    gauss_nodes,
    nodal_averaging_matrix,
    transfer,
)

logger = logging.getLogger(__name__)

PI2 = np.pi**2
HUBER_EPS = 1e-3

Source = Union[CellFunction, float, Callable[[np.ndarray], Any]]


class FemOperators(BaseModel):
    """
    Assembled P1 operators on the interior degrees of freedom.

    ``cell_load`` is E with E[j, i] = integral of phi_j over coarse cell i and
    ``avg_map`` is R = E^T / H, the nodal-to-coarse-cell averaging map.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    fem: Partition
    coarse: Partition
    stiffness: sp.csc_matrix
    mass: sp.csc_matrix
    mass_full: sp.csc_matrix
    cell_load: sp.csc_matrix
    avg_map: sp.csr_matrix

    @property
    def n_dofs(self) -> int:
        return self.fem.n_cells - 1


class PdeProblem(BaseModel):
    """State equation data: source, control bounds and the two grids."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    f: Source = Field(..., description="Source term")
    w_bounds: tuple[float, float] = Field(..., description="Control bounds (w_lo, w_hi)")
    fem_grid: Partition
    control_grid: Partition

    @field_validator("w_bounds")
    @classmethod
    def validate_w_bounds(cls, v: tuple[float, float]) -> tuple[float, float]:
        """Keep the state equation coercive."""
        w_lo, w_hi = v
        if w_lo > w_hi:
            raise ValueError(f"w_lo={w_lo} exceeds w_hi={w_hi}")
        if not (-PI2 < w_lo and w_hi < PI2):
            raise ValueError("Control bounds must satisfy -pi^2 < w_lo <= w_hi < pi^2")
        return (float(w_lo), float(w_hi))

    @model_validator(mode="after")
    def check_grids(self) -> "PdeProblem":
        self.control_grid.ratio_to(self.fem_grid)
        if isinstance(self.f, CellFunction):
            self.f.partition.ratio_to(self.fem_grid)
        return self

    @property
    def w_lo(self) -> float:
        return self.w_bounds[0]

    @property
    def w_hi(self) -> float:
        return self.w_bounds[1]

    @property
    def w_abs_max(self) -> float:
        return max(abs(self.w_lo), abs(self.w_hi))


class ConvergenceStudy(BaseModel):
    """Errors of the averaged state against the pointwise one over coarse levels."""

    h: list[float]
    l2_errors: list[float]
    h1_errors: list[float]
    l2_rate: float
    h1_rate: float


# ----------------------------------------------------------------------------
# Assembly
# ----------------------------------------------------------------------------


@lru_cache(maxsize=32)
def assemble(fem: Partition, coarse: Optional[Partition] = None) -> FemOperators:
    """
    Assemble stiffness, mass and averaging operators.

    Args:
        fem: FEM grid
        coarse: Averaging grid; defaults to the FEM grid

    Returns:
        FemOperators for the pair of grids

    Raises:
        IncompatibleGrids: If ``fem`` does not refine ``coarse``
    """
    coarse = coarse or fem
    coarse.ratio_to(fem)
    n, h = fem.n_cells, fem.h
    ones = np.ones(n + 1)

    stiffness = sp.diags(
        [-ones[:-2] / h, 2.0 * ones[:-1] / h, -ones[:-2] / h], [-1, 0, 1],
        shape=(n - 1, n - 1),
    )
    diag_full = np.full(n + 1, 4.0 * h / 6.0)
    diag_full[[0, -1]] = 2.0 * h / 6.0
    mass_full = sp.diags(
        [ones[:-1] * h / 6.0, diag_full, ones[:-1] * h / 6.0], [-1, 0, 1],
        shape=(n + 1, n + 1),
    ).tocsc()
    mass = mass_full[1:-1, 1:-1]

    avg_full = nodal_averaging_matrix(fem, coarse)
    avg_map = avg_full[:, 1:-1].tocsr()
    cell_load = (coarse.h * avg_map.T).tocsc()

    logger.debug("Assembled P1 operators: N=%d, N_h=%d", n, coarse.n_cells)
    return FemOperators(
        fem=fem,
        coarse=coarse,
        stiffness=stiffness.tocsc(),
        mass=mass.tocsc(),
        mass_full=mass_full,
        cell_load=cell_load,
        avg_map=avg_map,
    )


def source_l2_norm(prob: PdeProblem) -> float:
    """L2 norm of the source; exact for constant and piecewise-constant data."""
    f = prob.f
    if isinstance(f, CellFunction):
        return f.l2_norm()
    if callable(f):
        points = gauss_nodes(prob.fem_grid)
        samples = np.broadcast_to(np.asarray(f(points), dtype=float), points.shape)
        return float(np.sqrt(prob.fem_grid.h * np.sum(samples**2 @ GAUSS_WEIGHTS)))
    return abs(float(f))


def load_vector(fem: Partition, source: Union[Source, NodalFunction]) -> np.ndarray:
    """
    Interior load vector F_j = integral of source * phi_j.

    Exact for constant, piecewise-constant and P1 sources; callables use the
    3-point Gauss rule per cell.
    """
    n, h = fem.n_cells, fem.h
    if isinstance(source, NodalFunction):
        if source.partition != fem:
            raise IncompatibleGrids(
                f"Nodal load lives on {source.partition.n_cells} cells, FEM grid has {n}"
            )
        return (assemble(fem).mass_full @ source.values)[1:-1]
    if isinstance(source, CellFunction):
        values = transfer(source, fem).values
        return 0.5 * h * (values[:-1] + values[1:])
    if callable(source):
        points = gauss_nodes(fem)
        samples = np.broadcast_to(np.asarray(source(points), dtype=float), points.shape)
        left = h * (samples * (1.0 - GAUSS_POINTS)) @ GAUSS_WEIGHTS
        right = h * (samples * GAUSS_POINTS) @ GAUSS_WEIGHTS
        full = np.zeros(n + 1)
        full[:-1] += left
        full[1:] += right
        return full[1:-1]
    return np.full(n - 1, float(source) * h)


# ----------------------------------------------------------------------------
# State operators
# ----------------------------------------------------------------------------


def _banded_solve(ab: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if ab.shape[1] == 0:
        return np.zeros_like(rhs)
    try:
        x = la.solve_banded((1, 1), ab, rhs, check_finite=False)
    except (la.LinAlgError, ValueError) as e:
        raise SingularSystem(f"Tridiagonal factorization failed: {e}") from e
    if not np.all(np.isfinite(x)):
        raise SingularSystem("State solve produced non-finite values")
    return x


def _stiffness_bands(fem: Partition) -> np.ndarray:
    n, h = fem.n_cells, fem.h
    ab = np.zeros((3, n - 1))
    ab[0, 1:] = -1.0 / h
    ab[1, :] = 2.0 / h
    ab[2, :-1] = -1.0 / h
    return ab


def _transfer_matrix(source: Partition, target: Partition) -> sp.csr_matrix:
    """Linear map realizing ``transfer`` from ``source`` cells to ``target`` cells."""
    if source.n_cells >= target.n_cells:
        return averaging_matrix(source, target)
    r = source.ratio_to(target)
    return (r * averaging_matrix(target, source).T).tocsr()


class StateOperator:
    """
    Factorized state operator for one control.

    The pointwise operator is K + M_w. The averaged operator is
    K + E diag(P_h w) R; it is tridiagonal when the averaging grid is the FEM
    grid and otherwise solved with the Woodbury identity around K.
    """

    def __init__(self, prob: PdeProblem, w: CellFunction, coarse: Optional[Partition] = None):
        self.prob = prob
        self.fem = prob.fem_grid
        self.coarse = coarse
        h = self.fem.h
        ab = _stiffness_bands(self.fem)
        self._woodbury: Optional[tuple[np.ndarray, np.ndarray, Any]] = None

        if coarse is None:
            wf = transfer(w, self.fem).values
            self.w_cells = wf
            ab[1, :] += h / 3.0 * (wf[:-1] + wf[1:])
            ab[0, 1:] += h / 6.0 * wf[1:-1]
            ab[2, :-1] += h / 6.0 * wf[1:-1]
        else:
            self.ops = assemble(self.fem, coarse)
            wbar = transfer(w, coarse).values
            self.w_cells = wbar
            if coarse == self.fem:
                ab[1, :] += h / 4.0 * (wbar[:-1] + wbar[1:])
                ab[0, 1:] += h / 4.0 * wbar[1:-1]
                ab[2, :-1] += h / 4.0 * wbar[1:-1]
            else:
                x = _banded_solve(ab, self.ops.cell_load.toarray())
                small = np.eye(coarse.n_cells) + wbar[:, None] * (self.ops.avg_map @ x)
                try:
                    lu = la.lu_factor(small, check_finite=False)
                except (la.LinAlgError, ValueError) as e:
                    raise SingularSystem(f"Woodbury capacitance matrix is singular: {e}") from e
                self._woodbury = (x, wbar, lu)
        self.ab = ab

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve A u = rhs for interior values."""
        u0 = _banded_solve(self.ab, rhs)
        if self._woodbury is None:
            return u0
        x, wbar, lu = self._woodbury
        correction = la.lu_solve(lu, wbar * (self.ops.avg_map @ u0), check_finite=False)
        u = u0 - x @ correction
        if not np.all(np.isfinite(u)):
            raise SingularSystem("State solve produced non-finite values")
        return u

    def matrix(self) -> sp.csc_matrix:
        """Assembled sparse operator, for residual checks."""
        n = self.fem.n_cells - 1
        base = sp.diags(
            [self.ab[2, :-1], self.ab[1], self.ab[0, 1:]], [-1, 0, 1], shape=(n, n)
        ).tocsc()
        if self._woodbury is None:
            return base
        _, wbar, _ = self._woodbury
        return (base + self.ops.cell_load @ sp.diags(wbar) @ self.ops.avg_map).tocsc()


def state_matrix(
    prob: PdeProblem, w: CellFunction, coarse: Optional[Partition] = None
) -> sp.csc_matrix:
    """Sparse state operator on interior dofs."""
    return StateOperator(prob, w, coarse).matrix()


def solve_state(prob: PdeProblem, w: CellFunction) -> NodalFunction:
    """
    Solve the pointwise state equation int u'v' + int w u v = int f v.

    Args:
        prob: Problem data
        w: Control on a grid compatible with the FEM grid

    Returns:
        Nodal state with homogeneous Dirichlet values

    Raises:
        SingularSystem: If the tridiagonal factorization fails
    """
    op = StateOperator(prob, w)
    return NodalFunction.from_interior(prob.fem_grid, op.solve(load_vector(prob.fem_grid, prob.f)))


def solve_state_avg(prob: PdeProblem, w: CellFunction, coarse: Partition) -> NodalFunction:
    """
    Solve the averaged state equation int u'v' + int (P_h w)(P_h u) v = int f v.

    Raises:
        SingularSystem: If the factorization fails
    """
    op = StateOperator(prob, w, coarse)
    return NodalFunction.from_interior(prob.fem_grid, op.solve(load_vector(prob.fem_grid, prob.f)))


def solve_adjoint(
    prob: PdeProblem,
    w: CellFunction,
    rhs: NodalFunction,
    coarse: Optional[Partition] = None,
) -> NodalFunction:
    """Solve the (self-adjoint) state operator with source ``rhs``."""
    op = StateOperator(prob, w, coarse)
    return NodalFunction.from_interior(prob.fem_grid, op.solve(load_vector(prob.fem_grid, rhs)))


def monotone_envelope(prob: PdeProblem) -> tuple[NodalFunction, NodalFunction]:
    """Pointwise extremal states from the constant controls w = w_hi and w = w_lo."""
    u_min = solve_state(prob, CellFunction.constant(prob.control_grid, prob.w_hi))
    u_max = solve_state(prob, CellFunction.constant(prob.control_grid, prob.w_lo))
    return u_min, u_max


# ----------------------------------------------------------------------------
# Objective and derivatives
# ----------------------------------------------------------------------------


def tracking_objective(u: NodalFunction, u_d: NodalFunction) -> float:
    """0.5 * ||u - u_d||^2 with the exact P1 mass matrix."""
    return 0.5 * NodalFunction(partition=u.partition, values=u.values - u_d.values).l2_norm() ** 2


def huber(x: np.ndarray, eps: float = HUBER_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Overestimating Huber smoothing of |x| and its derivative."""
    ax = np.abs(x)
    inside = ax < eps
    value = np.where(inside, x * x / (2.0 * eps) + 0.5 * eps, ax)
    slope = np.where(inside, x / eps, np.sign(x))
    return value, slope


def huber_tv(w: CellFunction, eps: float = HUBER_EPS) -> tuple[float, np.ndarray]:
    """Huber-smoothed total variation and its gradient with respect to w."""
    value, slope = huber(np.diff(w.values), eps)
    grad = np.zeros(w.values.size)
    grad[:-1] -= slope
    grad[1:] += slope
    return float(value.sum()), grad


def _state_and_adjoint(
    prob: PdeProblem, w: CellFunction, u_d: NodalFunction, averaged: bool
) -> tuple[StateOperator, NodalFunction, NodalFunction]:
    op = StateOperator(prob, w, prob.control_grid if averaged else None)
    fem = prob.fem_grid
    u = NodalFunction.from_interior(fem, op.solve(load_vector(fem, prob.f)))
    residual = NodalFunction(partition=fem, values=u.values - u_d.values)
    p = NodalFunction.from_interior(fem, op.solve(load_vector(fem, residual)))
    return op, u, p


def objective_and_gradient(
    prob: PdeProblem,
    w: CellFunction,
    u_d: NodalFunction,
    alpha: float,
    eps_huber: float = HUBER_EPS,
    pointwise: bool = False,
) -> tuple[float, np.ndarray, NodalFunction]:
    """
    Smoothed reduced objective, its gradient on the control grid and the state.

    The averaged variant differentiates the averaged state equation on the
    control grid; the pointwise variant the original one.
    """
    op, u, p = _state_and_adjoint(prob, w, u_d, averaged=not pointwise)
    fem = prob.fem_grid
    if pointwise:
        a, b = p.values, u.values
        h = fem.h
        fine = -h / 6.0 * (
            2.0 * a[:-1] * b[:-1] + a[:-1] * b[1:] + a[1:] * b[:-1] + 2.0 * a[1:] * b[1:]
        )
        grad = _transfer_matrix(w.partition, fem).T @ fine
    else:
        ops = op.ops
        coarse = prob.control_grid
        cell = -coarse.h * (ops.avg_map @ p.interior) * (ops.avg_map @ u.interior)
        grad = _transfer_matrix(w.partition, coarse).T @ cell
    tv_value, tv_grad = huber_tv(w, eps_huber)
    value = tracking_objective(u, u_d) + alpha * tv_value
    return value, np.asarray(grad) + alpha * tv_grad, u


def reduced_gradient(
    prob: PdeProblem,
    w: CellFunction,
    u_d: NodalFunction,
    alpha_smooth: float,
    eps_huber: float = HUBER_EPS,
    pointwise: bool = False,
) -> CellFunction:
    """
    Gradient of j(S(w)) + alpha * HuberTV(w) with respect to the control.

    For the averaged state the bilinear contribution on cell i is
    -(P_h p)_i (P_h u)_i |Q_i|, where p solves the adjoint equation with
    source u - u_d.
    """
    _, grad, _ = objective_and_gradient(prob, w, u_d, alpha_smooth, eps_huber, pointwise)
    return w.with_values(grad)


def state_derivative(
    prob: PdeProblem, w: CellFunction, s: CellFunction, coarse: Partition
) -> NodalFunction:
    """Directional derivative S'(w)s of the averaged control-to-state map."""
    op = StateOperator(prob, w, coarse)
    fem = prob.fem_grid
    u = op.solve(load_vector(fem, prob.f))
    ops = op.ops
    sbar = transfer(s, coarse).values
    q = op.solve(-(ops.cell_load @ (sbar * (ops.avg_map @ u))))
    return NodalFunction.from_interior(fem, q)


def state_second_derivative(
    prob: PdeProblem,
    w: CellFunction,
    psi: CellFunction,
    phi: CellFunction,
    coarse: Partition,
) -> NodalFunction:
    """Second derivative S''(w)[psi, phi] of the averaged control-to-state map."""
    op = StateOperator(prob, w, coarse)
    fem = prob.fem_grid
    ops = op.ops
    u = op.solve(load_vector(fem, prob.f))
    psibar = transfer(psi, coarse).values
    phibar = transfer(phi, coarse).values
    q_phi = op.solve(-(ops.cell_load @ (phibar * (ops.avg_map @ u))))
    q_psi = op.solve(-(ops.cell_load @ (psibar * (ops.avg_map @ u))))
    source = psibar * (ops.avg_map @ q_phi) + phibar * (ops.avg_map @ q_psi)
    xi = op.solve(-(ops.cell_load @ source))
    return NodalFunction.from_interior(fem, xi)


def convergence_study(
    prob: PdeProblem, w: CellFunction, levels: list[Partition]
) -> ConvergenceStudy:
    """
    Compare the averaged state on each level with the pointwise state.

    The rates are slopes of a least-squares line through (log h, log error).
    """
    u = solve_state(prob, w)
    hs, l2, h1 = [], [], []
    for level in levels:
        u_h = solve_state_avg(prob, w, level)
        diff = NodalFunction(partition=prob.fem_grid, values=u.values - u_h.values)
        hs.append(level.h)
        l2.append(diff.l2_norm())
        h1.append(diff.h1_seminorm())
        logger.debug("h=%.3e  L2 error=%.3e  H1 error=%.3e", level.h, l2[-1], h1[-1])
    log_h = np.log(hs)
    l2_rate = float(np.polyfit(log_h, np.log(l2), 1)[0]) if len(hs) > 1 else float("nan")
    h1_rate = float(np.polyfit(log_h, np.log(h1), 1)[0]) if len(hs) > 1 else float("nan")
    return ConvergenceStudy(h=hs, l2_errors=l2, h1_errors=h1, l2_rate=l2_rate, h1_rate=h1_rate)
