"""
Optimization-based bound tightening of the per-cell state-average bounds.

Each sweep runs a lo-pass then a hi-pass over the cells in ascending order,
minimizing (resp. maximizing) the cell mean of u over the current McCormick
feasible set. New bounds are the LP optimum relaxed by the safeguard margin.
"""

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from mccpde.convex_core import SolveReport, solve, solve_lp_objective_swap
from mccpde.errors import BoundsCrossed, InfeasibleEnvelope, MonotonicityViolation, SolverFailure
from mccpde.fem1d import assemble
from mccpde.models import ObbtSettings, RuntimeSettings, SolverSettings, SolverStatus
from mccpde.relaxation import BuiltRelaxation, Envelope, RelaxationSpec, bound_lp, lower_bound_solve

logger = logging.getLogger(__name__)

Side = Literal["lo", "hi"]


class BoundEvent(BaseModel):
    """One bound LP."""

    sweep: int
    side: Side
    cell: int
    old: float
    new: float
    lp_value: float
    iters: int


class SweepRecord(BaseModel):
    """Summary of one lo-pass plus hi-pass."""

    sweep: int
    max_movement: float
    objective: float
    wall_time: float


class ObbtTrace(BaseModel):
    """Per-sweep records, per-bound events and the final envelope."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    initial_objective: float
    sweeps: list[SweepRecord] = Field(default_factory=list)
    events: list[BoundEvent] = Field(default_factory=list)
    final_env: Optional[Envelope] = None

    @property
    def objectives(self) -> list[float]:
        return [self.initial_objective] + [s.objective for s in self.sweeps]

    @property
    def total_iters(self) -> int:
        return sum(e.iters for e in self.events)


class ObbtResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    env: Envelope
    trace: ObbtTrace


class ObbtOutcome(BaseModel):
    """Relaxation optimum before and after tightening."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    m: float
    m_before: float
    env: Envelope
    trace: ObbtTrace


def _cell_cost(built: BuiltRelaxation, cell: int, sign: float) -> np.ndarray:
    spec = built.spec
    ops = assemble(spec.fem_grid, spec.env.coarse)
    cost = np.zeros(built.qp.n)
    cost[built.index.var_slice("u")] = sign * ops.avg_map.getrow(cell).toarray().ravel()
    return cost


def _checked(report: SolveReport, side: Side, cell: int) -> SolveReport:
    if report.status == SolverStatus.INFEASIBLE:
        raise InfeasibleEnvelope(
            f"Bound LP for cell {cell} ({side}) is infeasible; the safeguard margin is too small"
        )
    if not report.is_optimal:
        raise SolverFailure(
            f"Bound LP for cell {cell} ({side}) stopped with status {report.status.value}"
        )
    return report


class _Tightener:
    """Mutable state of one tightening run."""

    def __init__(
        self,
        spec: RelaxationSpec,
        settings: ObbtSettings,
        solver: Optional[SolverSettings],
        threads: int,
    ):
        self.spec = spec
        self.settings = settings
        self.solver = solver or SolverSettings()
        self.threads = threads
        self.env = spec.env
        self.lo = spec.env.u_lo.values.copy()
        self.hi = spec.env.u_hi.values.copy()
        self.built: Optional[BuiltRelaxation] = None
        self.last: Optional[SolveReport] = None

    def _refresh(self) -> BuiltRelaxation:
        self.env = self.env.with_u_bounds(self.lo, self.hi)
        self.built = bound_lp(self.spec.with_env(self.env))
        return self.built

    def _bound_lp(self, built: BuiltRelaxation, cell: int, side: Side) -> SolveReport:
        sign = 1.0 if side == "lo" else -1.0
        cost = _cell_cost(built, cell, sign)
        if self.last is not None:
            report = solve_lp_objective_swap(built.qp, cost, self.last)
        else:
            report = solve(built.qp.with_cost(cost), self.solver)
        return _checked(report, side, cell)

    def _accept(
        self, sweep: int, side: Side, cell: int, report: SolveReport
    ) -> tuple[BoundEvent, bool]:
        guard = self.settings.safeguard
        if side == "lo":
            value = report.obj
            old, new = self.lo[cell], value - guard
            self.lo[cell] = new
        else:
            value = -report.obj
            old, new = self.hi[cell], value + guard
            self.hi[cell] = new
        if self.lo[cell] > self.hi[cell]:
            raise BoundsCrossed(
                f"Cell {cell}: lower bound {self.lo[cell]:.9e} exceeds "
                f"upper bound {self.hi[cell]:.9e}"
            )
        event = BoundEvent(
            sweep=sweep, side=side, cell=cell, old=float(old), new=float(new),
            lp_value=float(value), iters=report.iters,
        )
        return event, bool(abs(new - old) > self.settings.sweep_tol)

    def sequential_pass(self, sweep: int, side: Side) -> list[BoundEvent]:
        events = []
        built = self._refresh()
        for cell in range(self.spec.env.coarse.n_cells):
            report = self._bound_lp(built, cell, side)
            self.last = report
            event, changed = self._accept(sweep, side, cell, report)
            events.append(event)
            if changed:
                built = self._refresh()
        return events

    def parallel_pass(self, sweep: int, side: Side) -> list[BoundEvent]:
        built = self._refresh()
        n_cells = self.spec.env.coarse.n_cells
        cells = np.array_split(np.arange(n_cells), min(self.threads, n_cells))
        chunks = [c for c in cells if c.size]
        base = self.last
        sign = 1.0 if side == "lo" else -1.0

        def run_chunk(chunk: np.ndarray) -> list[tuple[int, SolveReport]]:
            out, prev = [], None
            for cell in chunk:
                cost = _cell_cost(built, int(cell), sign)
                if prev is None:
                    warm = (base.x, base.y) if base is not None else None
                    report = solve(built.qp.with_cost(cost), self.solver, warm_start=warm)
                else:
                    report = solve_lp_objective_swap(built.qp, cost, prev)
                prev = _checked(report, side, int(cell))
                out.append((int(cell), report))
            return out

        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = [pair for chunk in pool.map(run_chunk, chunks) for pair in chunk]

        events = []
        for cell, report in sorted(results, key=lambda pair: pair[0]):
            event, _ = self._accept(sweep, side, cell, report)
            events.append(event)
        self.last = results[-1][1]
        return events


def tighten(
    spec: RelaxationSpec,
    settings: Optional[ObbtSettings] = None,
    solver: Optional[SolverSettings] = None,
    threads: Optional[int] = None,
) -> ObbtResult:
    """
    Tighten the state-average bounds of ``spec.env`` until a full sweep moves
    no bound by more than ``sweep_tol``.

    Args:
        spec: Relaxation whose envelope contains every state of the control problem
        settings: Safeguard, tolerance and sweep options
        solver: Convex solver settings
        threads: Worker cap for parallel sweeps; defaults to MCCPDE_THREADS

    Returns:
        ObbtResult with the tightened envelope and the trace

    Raises:
        InfeasibleEnvelope: If a bound LP is infeasible
        BoundsCrossed: If a lower bound ends above its upper bound
        MonotonicityViolation: If the relaxation optimum decreases between sweeps
    """
    settings = settings or ObbtSettings()
    threads = threads or RuntimeSettings().threads
    state = _Tightener(spec, settings, solver, threads)

    initial = lower_bound_solve(spec, state.solver)
    trace = ObbtTrace(initial_objective=initial.m)
    previous = initial.m
    warm = (initial.report.x, initial.report.y)

    for sweep in range(1, settings.max_sweeps + 1):
        started = time.perf_counter()
        run_pass = state.parallel_pass if settings.parallel else state.sequential_pass
        events = run_pass(sweep, "lo") + run_pass(sweep, "hi")
        movement = max((abs(e.new - e.old) for e in events), default=0.0)

        env = state.env.with_u_bounds(state.lo, state.hi)
        state.env = env
        result = lower_bound_solve(spec.with_env(env), state.solver, warm_start=warm)
        warm = (result.report.x, result.report.y)
        if result.m < previous - settings.monotone_tol * max(1.0, abs(previous)):
            raise MonotonicityViolation(
                f"Relaxation optimum decreased from {previous:.12e} to {result.m:.12e} "
                f"in sweep {sweep}"
            )
        previous = max(previous, result.m)

        record = SweepRecord(
            sweep=sweep,
            max_movement=movement,
            objective=result.m,
            wall_time=time.perf_counter() - started,
        )
        trace.sweeps.append(record)
        trace.events.extend(events)
        logger.info(
            "OBBT sweep %d: max movement %.3e, m = %.8e (%.1fs)",
            sweep, movement, result.m, record.wall_time,
        )
        if movement <= settings.sweep_tol:
            break
    else:
        logger.warning("OBBT stopped after max_sweeps=%d", settings.max_sweeps)

    trace.final_env = state.env
    return ObbtResult(env=state.env, trace=trace)


def lower_bound_after_obbt(
    spec: RelaxationSpec,
    settings: Optional[ObbtSettings] = None,
    solver: Optional[SolverSettings] = None,
    threads: Optional[int] = None,
) -> ObbtOutcome:
    """Tighten, then solve the relaxation on the tightened envelope."""
    result = tighten(spec, settings, solver, threads)
    m = result.trace.sweeps[-1].objective if result.trace.sweeps else result.trace.initial_objective
    m_before = result.trace.initial_objective
    if m < m_before - 1e-9:
        raise MonotonicityViolation(
            f"Tightened relaxation optimum {m:.12e} is below the untightened {m_before:.12e}"
        )
    return ObbtOutcome(m=m, m_before=m_before, env=result.env, trace=result.trace)


def write_trace_csv(trace: ObbtTrace, path: Union[str, Path]) -> None:
    """One row per bound LP with the objective of its sweep."""
    objective = {s.sweep: s.objective for s in trace.sweeps}
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sweep", "side", "cell", "old", "new", "lp_value", "objective"])
        for e in trace.events:
            writer.writerow(
                [e.sweep, e.side, e.cell, repr(e.old), repr(e.new), repr(e.lp_value),
                 repr(objective.get(e.sweep, float("nan")))]
            )
