"""
McCormick relaxations of the bilinear state equation as sparse QPs.

Variables are ordered [u interior nodes | w cells | z coarse cells | t jumps]
and constraint rows [state | McCormick | u box | w box | TV epigraph]. The
McCormick block holds four rows per coarse cell, grouped by inequality type
(ll, uu, ul, lu) and ordered by cell inside each group.
"""

import json
import logging
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, model_validator

from mccpde.convex_core import INF, SolveReport, SparseQP, dump_qp, solve
from mccpde.errors import InfeasibleProblem, SolverFailure, SpecMismatch
from mccpde.fem1d import PdeProblem, assemble, load_vector, monotone_envelope, solve_state_avg
from mccpde.grid import (
    CellFunction,
    NodalFunction,
    Partition,
    averaging_matrix,
    project_avg,
    prolong,
    transfer,
)
from mccpde.models import RelaxationKind, SolverSettings, SolverStatus

logger = logging.getLogger(__name__)

MCCORMICK_ROWS = ("ll", "uu", "ul", "lu")


class Envelope(BaseModel):
    """Per-cell state-average and control bounds defining the McCormick set."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    coarse: Partition
    u_lo: CellFunction
    u_hi: CellFunction
    w_lo: CellFunction
    w_hi: CellFunction

    @model_validator(mode="after")
    def check_bounds(self) -> "Envelope":
        for name in ("u_lo", "u_hi", "w_lo", "w_hi"):
            cf = getattr(self, name)
            if cf.partition != self.coarse:
                raise ValueError(f"{name} is not defined on the envelope grid")
            if not np.all(np.isfinite(cf.values)):
                raise ValueError(f"{name} has non-finite entries")
        if np.any(self.u_lo.values > self.u_hi.values):
            raise ValueError("u_lo exceeds u_hi")
        if np.any(self.w_lo.values > self.w_hi.values):
            raise ValueError("w_lo exceeds w_hi")
        return self

    @classmethod
    def uniform(
        cls, coarse: Partition, u_bound: float, w_bounds: tuple[float, float]
    ) -> "Envelope":
        """Constant bounds |u| <= u_bound and w_bounds on every cell."""
        return cls(
            coarse=coarse,
            u_lo=CellFunction.constant(coarse, -u_bound),
            u_hi=CellFunction.constant(coarse, u_bound),
            w_lo=CellFunction.constant(coarse, w_bounds[0]),
            w_hi=CellFunction.constant(coarse, w_bounds[1]),
        )

    @classmethod
    def tightest(cls, prob: PdeProblem, coarse: Partition) -> "Envelope":
        """Cell means of the states for the constant controls w_hi and w_lo."""
        u_min, u_max = monotone_envelope(prob)
        return cls(
            coarse=coarse,
            u_lo=project_avg(u_min, coarse),
            u_hi=project_avg(u_max, coarse),
            w_lo=CellFunction.constant(coarse, prob.w_lo),
            w_hi=CellFunction.constant(coarse, prob.w_hi),
        )

    def with_u_bounds(self, u_lo: Any, u_hi: Any) -> "Envelope":
        return Envelope(
            coarse=self.coarse,
            u_lo=self.u_lo.with_values(u_lo),
            u_hi=self.u_hi.with_values(u_hi),
            w_lo=self.w_lo,
            w_hi=self.w_hi,
        )


class RelaxationSpec(BaseModel):
    """Everything needed to build one relaxation."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    kind: RelaxationKind
    prob: PdeProblem
    env: Envelope
    alpha: float = Field(..., ge=0, description="TV weight")
    u_d: NodalFunction

    @model_validator(mode="after")
    def check_grids(self) -> "RelaxationSpec":
        fem, coarse = self.prob.fem_grid, self.env.coarse
        if self.u_d.partition != fem:
            raise SpecMismatch("Tracking target must live on the FEM grid")
        if fem.n_cells % coarse.n_cells:
            raise SpecMismatch(
                f"Envelope grid ({coarse.n_cells} cells) does not divide the FEM grid"
            )
        if self.kind == RelaxationKind.POINTWISE and not (
            coarse == fem and self.prob.control_grid == fem
        ):
            raise SpecMismatch("The pointwise relaxation lives on the FEM cell grid")
        if (
            self.kind == RelaxationKind.AVERAGED
            and self.prob.control_grid.n_cells % coarse.n_cells
        ):
            raise SpecMismatch("Envelope grid must be coarser than the control grid")
        return self

    @property
    def fem_grid(self) -> Partition:
        return self.prob.fem_grid

    @property
    def w_grid(self) -> Partition:
        """Grid on which the w variables live."""
        if self.kind == RelaxationKind.FULLY_AVERAGED:
            return self.env.coarse
        return self.prob.control_grid

    def with_env(self, env: Envelope) -> "RelaxationSpec":
        return self.model_copy(update={"env": env})


class RelaxationIndex(BaseModel):
    """Variable and row layout of a built relaxation, as half-open ranges."""

    kind: RelaxationKind
    fem_cells: int
    coarse_cells: int
    w_cells: int
    n_vars: int
    n_rows: int
    variables: dict[str, tuple[int, int]]
    rows: dict[str, tuple[int, int]]
    mccormick_order: list[str] = Field(default_factory=lambda: list(MCCORMICK_ROWS))

    def var_slice(self, name: str) -> slice:
        return slice(*self.variables[name])

    def row_slice(self, name: str) -> slice:
        return slice(*self.rows[name])


class RelaxationSolution(BaseModel):
    """Relaxation variables mapped back to functions."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    u: NodalFunction
    w: CellFunction
    z: CellFunction
    t: np.ndarray


class BuiltRelaxation(BaseModel):
    """A relaxation as SparseQP with its layout and the constant tracking term."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    spec: RelaxationSpec
    qp: SparseQP
    index: RelaxationIndex
    objective_constant: float

    def extract(self, x: np.ndarray) -> RelaxationSolution:
        idx, spec = self.index, self.spec
        return RelaxationSolution(
            u=NodalFunction.from_interior(spec.fem_grid, x[idx.var_slice("u")]),
            w=CellFunction(partition=spec.w_grid, values=x[idx.var_slice("w")]),
            z=CellFunction(partition=spec.env.coarse, values=x[idx.var_slice("z")]),
            t=x[idx.var_slice("t")],
        )


class LowerBound(BaseModel):
    """Relaxation optimum m, including the constant tracking term."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    m: float
    report: SolveReport
    solution: RelaxationSolution


def _w_map(spec: RelaxationSpec) -> sp.csr_matrix:
    """Map from w variables to their coarse-cell means."""
    return averaging_matrix(spec.w_grid, spec.env.coarse)


def _difference_matrix(n: int) -> sp.csr_matrix:
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)).tocsr()


def build(spec: RelaxationSpec, include_tv: bool = True) -> BuiltRelaxation:
    """
    Assemble the relaxation QP.

    The TV epigraph block is left out when alpha is zero or ``include_tv`` is
    false; it never restricts (u, w, z).

    Args:
        spec: Relaxation data
        include_tv: Whether to add the t variables and TV rows

    Returns:
        BuiltRelaxation with the QP, its index map and the constant 0.5 u_d'M u_d
    """
    prob, env = spec.prob, spec.env
    fem, coarse, w_grid = spec.fem_grid, env.coarse, spec.w_grid
    ops = assemble(fem, coarse)

    n_u, n_w, n_z = fem.n_cells - 1, w_grid.n_cells, coarse.n_cells
    n_t = n_w - 1 if include_tv and spec.alpha > 0 else 0
    n = n_u + n_w + n_z + n_t

    R = ops.avg_map
    T = _w_map(spec)
    I_z = sp.identity(n_z, format="csr")
    ul, uu = env.u_lo.values, env.u_hi.values
    wl, wu = env.w_lo.values, env.w_hi.values

    def row_block(u_part=None, w_part=None, z_part=None, t_part=None, m=0) -> sp.csr_matrix:
        return sp.hstack(
            [
                u_part if u_part is not None else sp.csr_matrix((m, n_u)),
                w_part if w_part is not None else sp.csr_matrix((m, n_w)),
                z_part if z_part is not None else sp.csr_matrix((m, n_z)),
                t_part if t_part is not None else sp.csr_matrix((m, n_t)),
            ],
            format="csr",
        )

    blocks, lower, upper, rows = [], [], [], {}

    def add(name: str, block: sp.csr_matrix, lo: np.ndarray, hi: np.ndarray) -> None:
        start = sum(b.shape[0] for b in blocks)
        blocks.append(block)
        lower.append(lo)
        upper.append(hi)
        rows[name] = (start, start + block.shape[0])

    F = load_vector(fem, prob.f)
    add("state", row_block(u_part=ops.stiffness, z_part=ops.cell_load, m=n_u), F, F)

    ninf = np.full(n_z, -INF)
    pinf = np.full(n_z, INF)
    mcc = [
        (row_block(-sp.diags(wl) @ R, -sp.diags(ul) @ T, I_z, m=n_z), -ul * wl, pinf),
        (row_block(-sp.diags(wu) @ R, -sp.diags(uu) @ T, I_z, m=n_z), -uu * wu, pinf),
        (row_block(-sp.diags(wl) @ R, -sp.diags(uu) @ T, I_z, m=n_z), ninf, -uu * wl),
        (row_block(-sp.diags(wu) @ R, -sp.diags(ul) @ T, I_z, m=n_z), ninf, -ul * wu),
    ]
    add(
        "mccormick",
        sp.vstack([b for b, _, _ in mcc], format="csr"),
        np.concatenate([lo for _, lo, _ in mcc]),
        np.concatenate([hi for _, _, hi in mcc]),
    )
    add("u_box", row_block(u_part=R, m=n_z), ul, uu)

    w_lo_cells = prolong(env.w_lo, w_grid).values
    w_hi_cells = prolong(env.w_hi, w_grid).values
    add("w_box", row_block(w_part=sp.identity(n_w, format="csr"), m=n_w), w_lo_cells, w_hi_cells)

    if n_t:
        Dw = _difference_matrix(n_w)
        I_t = sp.identity(n_t, format="csr")
        tv_block = sp.vstack(
            [row_block(w_part=Dw, t_part=-I_t, m=n_t), row_block(w_part=-Dw, t_part=-I_t, m=n_t)],
            format="csr",
        )
        add("tv", tv_block, np.full(2 * n_t, -INF), np.zeros(2 * n_t))

    A = sp.vstack(blocks, format="csc")
    P = sp.block_diag(
        [ops.mass, sp.csc_matrix((n - n_u, n - n_u))], format="csc"
    )
    Md = ops.mass_full @ spec.u_d.values
    q = np.zeros(n)
    q[:n_u] = -Md[1:-1]
    q[n - n_t :] = spec.alpha
    constant = 0.5 * float(spec.u_d.values @ Md)

    variables = {
        "u": (0, n_u),
        "w": (n_u, n_u + n_w),
        "z": (n_u + n_w, n_u + n_w + n_z),
        "t": (n - n_t, n),
    }
    names = (
        [f"u[{j}]" for j in range(1, n_u + 1)]
        + [f"w[{i}]" for i in range(n_w)]
        + [f"z[{i}]" for i in range(n_z)]
        + [f"t[{i}]" for i in range(n_t)]
    )
    qp = SparseQP(
        P=P, q=q, A=A, l=np.concatenate(lower), u=np.concatenate(upper), var_names=names
    )
    index = RelaxationIndex(
        kind=spec.kind,
        fem_cells=fem.n_cells,
        coarse_cells=n_z,
        w_cells=n_w,
        n_vars=n,
        n_rows=A.shape[0],
        variables=variables,
        rows=rows,
    )
    logger.debug("Built %s relaxation: %d variables, %d rows", spec.kind.value, n, A.shape[0])
    return BuiltRelaxation(spec=spec, qp=qp, index=index, objective_constant=constant)


def bound_lp(spec: RelaxationSpec) -> BuiltRelaxation:
    """Feasible set of the relaxation without the TV block and with zero cost."""
    built = build(spec, include_tv=False)
    return built.model_copy(update={"qp": feasibility_qp(built), "objective_constant": 0.0})


def feasibility_qp(built: BuiltRelaxation) -> SparseQP:
    """Same constraints as ``built`` with zero cost."""
    qp = built.qp
    return SparseQP(
        P=sp.csc_matrix(qp.P.shape), q=np.zeros(qp.n), A=qp.A, l=qp.l, u=qp.u,
        var_names=qp.var_names,
    )


def embed_point(built: BuiltRelaxation, w: CellFunction) -> np.ndarray:
    """
    Canonical relaxation point of a control: averaged state, z = (P_h u)(P_h w)
    and t = |jumps of w|.
    """
    spec = built.spec
    coarse = spec.env.coarse
    w_var = transfer(w, spec.w_grid)
    u = solve_state_avg(spec.prob, w_var, coarse)
    ops = assemble(spec.fem_grid, coarse)
    z = (ops.avg_map @ u.interior) * (_w_map(spec) @ w_var.values)
    n_t = built.index.variables["t"][1] - built.index.variables["t"][0]
    t = np.abs(np.diff(w_var.values)) if n_t else np.zeros(0)
    return np.concatenate([u.interior, w_var.values, z, t])


def embed_check(spec: RelaxationSpec, w: CellFunction) -> float:
    """Largest constraint violation of the embedded point of ``w``."""
    built = build(spec)
    violation = built.qp.violation(embed_point(built, w))
    return float(violation.max()) if violation.size else 0.0


def lower_bound_solve(
    spec: RelaxationSpec,
    settings: Optional[SolverSettings] = None,
    warm_start: Optional[tuple[np.ndarray, Optional[np.ndarray]]] = None,
) -> LowerBound:
    """
    Solve the relaxation; its optimum is a lower bound on the control problem.

    Raises:
        InfeasibleProblem: If the solver certifies infeasibility
        SolverFailure: If the solver stops without an optimal solution
    """
    built = build(spec)
    report = solve(built.qp, settings, warm_start=warm_start)
    if report.status == SolverStatus.INFEASIBLE:
        raise InfeasibleProblem(f"{spec.kind.value} relaxation is infeasible")
    if not report.is_optimal:
        raise SolverFailure(
            f"{spec.kind.value} relaxation stopped with status {report.status.value} "
            f"(prim {report.prim_res:.2e}, dual {report.dual_res:.2e})"
        )
    m = report.obj + built.objective_constant
    logger.info(
        "%s lower bound on %d cells: m = %.6e (%d iterations)",
        spec.kind.value, spec.env.coarse.n_cells, m, report.iters,
    )
    return LowerBound(m=m, report=report, solution=built.extract(report.x))


def dump(built: BuiltRelaxation, path: Union[str, Path]) -> Path:
    """Write the QP and a JSON sidecar with the index map; returns the sidecar path."""
    path = Path(path)
    dump_qp(built.qp, path)
    sidecar = path.with_suffix(path.suffix + ".json")
    payload = built.index.model_dump(mode="json")
    payload["objective_constant"] = built.objective_constant
    sidecar.write_text(json.dumps(payload, indent=2))
    return sidecar
