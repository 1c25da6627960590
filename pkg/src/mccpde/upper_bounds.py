"""
Feasible controls and upper bounds.

The continuous problem is attacked through the Huber-smoothed reduced
objective; the integer variant by rounding followed by a deterministic local
search. Reported upper bounds are always the nonsmooth objective of the
returned control.
"""

import logging
import math
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import minimize

from mccpde.fem1d import (
    HUBER_EPS,
    PdeProblem,
    objective_and_gradient,
    solve_state,
    solve_state_avg,
    tracking_objective,
)
from mccpde.grid import CellFunction, NodalFunction, Partition, transfer, tv

logger = logging.getLogger(__name__)

Method = Literal["l-bfgs-b", "projected-gradient"]

ARMIJO_C = 1e-4
STEP_TOL = 1e-8
MAX_ITER = 5000


class PrimalResult(BaseModel):
    """A feasible control, its state and objective values."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    w: CellFunction
    u: NodalFunction
    obj_nonsmooth: float
    obj_smoothed: float
    iters: int
    method: str
    history: list[float] = Field(default_factory=list, description="Accepted objective values")


def _state(prob: PdeProblem, w: CellFunction, averaged: bool) -> NodalFunction:
    if averaged:
        return solve_state_avg(prob, w, prob.control_grid)
    return solve_state(prob, w)


def evaluate(
    prob: PdeProblem, u_d: NodalFunction, alpha: float, w: CellFunction, averaged: bool = False
) -> float:
    """Nonsmooth objective 0.5 ||S(w) - u_d||^2 + alpha TV(w)."""
    return tracking_objective(_state(prob, w, averaged), u_d) + alpha * tv(w)


def _result(
    prob: PdeProblem,
    u_d: NodalFunction,
    alpha: float,
    w: CellFunction,
    averaged: bool,
    smoothed: float,
    iters: int,
    method: str,
    history: list[float],
) -> PrimalResult:
    u = _state(prob, w, averaged)
    obj = tracking_objective(u, u_d) + alpha * tv(w)
    return PrimalResult(
        w=w, u=u, obj_nonsmooth=obj, obj_smoothed=smoothed, iters=iters,
        method=method, history=history,
    )


def _projected_gradient(
    fun, x0: np.ndarray, lo: float, hi: float, max_iter: int, step_tol: float
) -> tuple[np.ndarray, float, int, list[float]]:
    x = np.clip(x0, lo, hi)
    value, grad = fun(x)
    history = [value]
    step = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        step *= 2.0
        while True:
            trial = np.clip(x - step * grad, lo, hi)
            trial_value, trial_grad = fun(trial)
            if trial_value <= value + ARMIJO_C * grad @ (trial - x) or step < 1e-16:
                break
            step *= 0.5
        moved = float(np.linalg.norm(trial - x))
        if trial_value <= value:
            x, value, grad = trial, trial_value, trial_grad
            history.append(value)
        if moved < step_tol:
            break
    return x, value, it, history


def solve_continuous(
    prob: PdeProblem,
    u_d: NodalFunction,
    alpha: float,
    eps_huber: float = HUBER_EPS,
    grid: Optional[Partition] = None,
    method: Method = "l-bfgs-b",
    start: Optional[float] = None,
    max_iter: int = MAX_ITER,
    step_tol: float = STEP_TOL,
    averaged: bool = False,
) -> PrimalResult:
    """
    Minimize the Huber-smoothed reduced objective over box-constrained controls.

    Args:
        prob: Problem data
        u_d: Tracking target on the FEM grid
        alpha: TV weight
        eps_huber: Huber smoothing parameter
        grid: Control grid; defaults to the problem's control grid
        method: scipy L-BFGS-B or projected gradient with Armijo backtracking
        start: Constant start control; defaults to the midpoint of the bounds
        max_iter: Iteration cap
        step_tol: Projected-gradient stopping threshold on the step norm
        averaged: Use the averaged state equation instead of the pointwise one

    Returns:
        PrimalResult of the final iterate
    """
    grid = grid or prob.control_grid
    lo, hi = prob.w_lo, prob.w_hi
    x0 = np.full(grid.n_cells, 0.5 * (lo + hi) if start is None else float(start))
    template = CellFunction.constant(grid, 0.0)

    def fun(x: np.ndarray) -> tuple[float, np.ndarray]:
        value, grad, _ = objective_and_gradient(
            prob, template.with_values(x), u_d, alpha, eps_huber, pointwise=not averaged
        )
        return value, grad

    if method == "l-bfgs-b":
        history: list[float] = []
        res = minimize(
            fun,
            x0,
            jac=True,
            method="L-BFGS-B",
            bounds=[(lo, hi)] * grid.n_cells,
            callback=lambda xk: history.append(fun(xk)[0]),
            options={"maxiter": max_iter, "ftol": 1e-14, "gtol": 1e-10},
        )
        x, value, iters = np.clip(res.x, lo, hi), float(res.fun), int(res.nit)
        logger.debug("L-BFGS-B: %s", res.message)
    else:
        x, value, iters, history = _projected_gradient(fun, x0, lo, hi, max_iter, step_tol)

    result = _result(
        prob, u_d, alpha, template.with_values(x), averaged, value, iters, method, history
    )
    logger.info(
        "Continuous upper bound (%s): %.6e after %d iterations",
        method, result.obj_nonsmooth, iters,
    )
    return result


def _moves(w: np.ndarray, lo: int, hi: int):
    """Neighbourhood in fixed order: single-cell values, two-cell swaps, adjacent joint +-1."""
    n = w.size
    for i in range(n):
        for v in range(lo, hi + 1):
            if v != w[i]:
                cand = w.copy()
                cand[i] = v
                yield cand
    for i in range(n - 1):
        for j in range(i + 1, n):
            if w[i] != w[j]:
                cand = w.copy()
                cand[i], cand[j] = w[j], w[i]
                yield cand
    for i in range(n - 1):
        for d in (-1, 1):
            cand = w.copy()
            cand[i : i + 2] += d
            if cand[i : i + 2].min() >= lo and cand[i : i + 2].max() <= hi:
                yield cand


def solve_integer(
    prob: PdeProblem,
    u_d: NodalFunction,
    alpha: float,
    grid: Optional[Partition] = None,
    continuous: Optional[PrimalResult] = None,
    averaged: bool = False,
    max_rounds: int = 1000,
) -> PrimalResult:
    """
    Integer-valued control by rounding and first-improvement local search.

    Starts from the rounded continuous solution (computed if not given). Each
    round takes the first strictly improving move in neighbourhood order; the
    search stops when a full pass finds none. The result is a heuristic upper bound.
    """
    grid = grid or prob.control_grid
    lo, hi = math.ceil(prob.w_lo), math.floor(prob.w_hi)
    template = CellFunction.constant(grid, 0.0)
    if continuous is None:
        continuous = solve_continuous(prob, u_d, alpha, grid=grid, averaged=averaged)
    start = transfer(continuous.w, grid)
    w = np.clip(np.rint(start.values), lo, hi).astype(float)

    def obj(x: np.ndarray) -> float:
        return evaluate(prob, u_d, alpha, template.with_values(x), averaged)

    value = obj(w)
    history = [value]
    rounds = 0
    improved = True
    while improved and rounds < max_rounds:
        improved = False
        rounds += 1
        for cand in _moves(w, lo, hi):
            cand_value = obj(cand)
            if cand_value < value:
                w, value = cand, cand_value
                history.append(value)
                improved = True
                break

    result = _result(
        prob, u_d, alpha, template.with_values(w), averaged, value, rounds,
        "integer-local-search", history,
    )
    logger.info("Integer heuristic upper bound: %.6e after %d rounds", value, rounds)
    return result
