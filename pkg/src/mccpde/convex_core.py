"""
Sparse convex quadratic programs and an operator-splitting solver.

Problems have the form

    minimize    0.5 x'Px + q'x
    subject to  l <= Ax <= u

and are solved with ADMM on the equilibrated problem followed by a polishing
step on the detected active set, which brings residuals to the 1e-9 level
that bound tightening relies on.
"""

import copy
import logging
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from pydantic import BaseModel, ConfigDict, PrivateAttr, field_validator, model_validator

from mccpde.models import SolverSettings, SolverStatus

logger = logging.getLogger(__name__)

INF = 1e20
PSD_SHIFT = 1e-12
RHO_MIN = 1e-6
RHO_MAX = 1e6
RHO_EQ_SCALE = 1e3
SCALING_MIN = 1e-4
SCALING_MAX = 1e4
DUMP_HEADER = "mccpde-qp 1"


def _dense(v: Any) -> np.ndarray:
    array = np.array(v, dtype=float, copy=True).reshape(-1)
    array.setflags(write=False)
    return array


def _bounds(v: Any) -> np.ndarray:
    array = np.array(v, dtype=float, copy=True).reshape(-1)
    np.clip(array, -INF, INF, out=array)
    array.setflags(write=False)
    return array


def _col_inf_norm(M: sp.spmatrix) -> np.ndarray:
    if M.shape[0] == 0:
        return np.zeros(M.shape[1])
    return np.asarray(abs(M).max(axis=0).todense()).ravel()


def _row_inf_norm(M: sp.spmatrix) -> np.ndarray:
    if M.shape[1] == 0:
        return np.zeros(M.shape[0])
    return np.asarray(abs(M).max(axis=1).todense()).ravel()


def _norm(v: np.ndarray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


class SparseQP(BaseModel):
    """Convex QP data in CSC form; infinite bounds are stored as +-1e20."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    l: np.ndarray
    u: np.ndarray
    var_names: Optional[list[str]] = None

    @field_validator("P", "A", mode="before")
    @classmethod
    def validate_matrix(cls, v: Any) -> sp.csc_matrix:
        """Store matrices as CSC with float entries."""
        return sp.csc_matrix(v, dtype=float)

    @field_validator("q", mode="before")
    @classmethod
    def validate_cost(cls, v: Any) -> np.ndarray:
        return _dense(v)

    @field_validator("l", "u", mode="before")
    @classmethod
    def validate_bounds(cls, v: Any) -> np.ndarray:
        """Replace infinite bounds with the sentinel."""
        return _bounds(v)

    @model_validator(mode="after")
    def check_shapes(self) -> "SparseQP":
        n = self.q.size
        if self.P.shape != (n, n):
            raise ValueError(f"P has shape {self.P.shape}, expected {(n, n)}")
        if self.A.shape[1] != n:
            raise ValueError(f"A has {self.A.shape[1]} columns, expected {n}")
        m = self.A.shape[0]
        if self.l.size != m or self.u.size != m:
            raise ValueError("Bound vectors must match the number of rows of A")
        if np.any(self.l > self.u):
            raise ValueError("Lower bounds exceed upper bounds")
        if self.var_names is not None and len(self.var_names) != n:
            raise ValueError("var_names must label every variable")
        asym = abs(self.P - self.P.T)
        if asym.nnz and asym.max() > 1e-12 * max(1.0, abs(self.P).max()):
            raise ValueError("P must be symmetric")
        _check_psd(self.P)
        return self

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m(self) -> int:
        return self.l.size

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x)

    def violation(self, x: np.ndarray) -> np.ndarray:
        """Per-row constraint violation of x."""
        ax = self.A @ x
        return np.maximum(np.maximum(self.l - ax, ax - self.u), 0.0)

    def with_cost(self, q: Any) -> "SparseQP":
        """Same feasible set and P, new linear cost."""
        q = _dense(q)
        if q.size != self.n:
            raise ValueError(f"Cost has {q.size} entries, expected {self.n}")
        return self.model_copy(update={"q": q})


def _check_psd(P: sp.csc_matrix) -> None:
    n = P.shape[0]
    if n == 0:
        return
    shifted = (P + PSD_SHIFT * sp.identity(n, format="csc")).tocsc()
    try:
        lu = spla.splu(
            shifted,
            permc_spec="NATURAL",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )
    except RuntimeError as e:
        raise ValueError(f"P is not positive semidefinite: {e}") from e
    if np.any(lu.U.diagonal() <= 0.0):
        raise ValueError("P is not positive semidefinite")


class SolveReport(BaseModel):
    """Outcome of a solve; residuals refer to the unscaled problem."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    x: np.ndarray
    y: np.ndarray
    obj: float
    status: SolverStatus
    prim_res: float
    dual_res: float
    iters: int
    polished: bool = False

    _workspace: Optional["Workspace"] = PrivateAttr(default=None)

    @property
    def is_optimal(self) -> bool:
        return self.status == SolverStatus.OPTIMAL


class Workspace:
    """
    Equilibrated problem data, KKT factorization and iterates.

    A workspace can be re-targeted at a new linear cost without refactoring,
    since scaling and the KKT matrix only depend on P, A and the penalty.
    """

    def __init__(self, qp: SparseQP, settings: SolverSettings):
        self.qp = qp
        self.settings = settings
        self._scale()
        self._init_rho()
        self._factor()
        n, m = qp.n, qp.m
        self.x = np.zeros(n)
        self.z = np.zeros(m)
        self.y = np.zeros(m)

    # -- setup ------------------------------------------------------------

    def _scale(self) -> None:
        qp, settings = self.qp, self.settings
        n, m = qp.n, qp.m
        P, A, q = qp.P.copy(), qp.A.copy(), qp.q.copy()
        D, E, c = np.ones(n), np.ones(m), 1.0

        for _ in range(settings.scaling_iter):
            norm_x = np.maximum(_col_inf_norm(P), _col_inf_norm(A))
            norm_z = _row_inf_norm(A)
            norm_x[norm_x < SCALING_MIN] = 1.0
            norm_z[norm_z < SCALING_MIN] = 1.0
            dx = 1.0 / np.sqrt(np.minimum(norm_x, SCALING_MAX))
            dz = 1.0 / np.sqrt(np.minimum(norm_z, SCALING_MAX))
            Dx, Dz = sp.diags(dx), sp.diags(dz)
            P = (Dx @ P @ Dx).tocsc()
            A = (Dz @ A @ Dx).tocsc()
            q = dx * q
            D *= dx
            E *= dz

            cost = max(float(np.mean(_col_inf_norm(P))) if n else 0.0, _norm(q))
            cost = 1.0 if cost < SCALING_MIN else min(cost, SCALING_MAX)
            P = P / cost
            q = q / cost
            c /= cost

        self.D, self.E, self.c = D, E, c
        self.P, self.A, self.q = P.tocsc(), A.tocsc(), q
        self.lower_inf = qp.l <= -INF
        self.upper_inf = qp.u >= INF
        self.l = np.where(self.lower_inf, -INF, E * qp.l)
        self.u = np.where(self.upper_inf, INF, E * qp.u)

    def _init_rho(self) -> None:
        qp = self.qp
        self.eq = np.abs(qp.u - qp.l) <= 1e-12 * np.maximum(1.0, np.abs(qp.l))
        self.free = self.lower_inf & self.upper_inf
        self.rho = self.settings.rho
        self.rho_vec = self._rho_vector(self.rho)

    def _rho_vector(self, rho: float) -> np.ndarray:
        vec = np.full(self.qp.m, rho)
        vec[self.eq] = RHO_EQ_SCALE * rho
        vec[self.free] = RHO_MIN
        return vec

    def _factor(self) -> None:
        n = self.qp.n
        kkt = sp.bmat(
            [
                [self.P + self.settings.sigma * sp.identity(n), self.A.T],
                [self.A, -sp.diags(1.0 / self.rho_vec)],
            ],
            format="csc",
        )
        self.kkt = spla.splu(kkt)

    def with_cost(self, qp: SparseQP) -> "Workspace":
        """Shallow copy that solves ``qp``, which must share P, A, l and u."""
        ws = copy.copy(self)
        ws.qp = qp
        ws.q = self.c * self.D * qp.q
        ws.x, ws.z, ws.y = self.x.copy(), self.z.copy(), self.y.copy()
        return ws

    def matches(self, qp: SparseQP) -> bool:
        """True if ``qp`` has the same constraint data and P as this workspace."""
        mine = self.qp
        if mine.A.shape != qp.A.shape or mine.P.shape != qp.P.shape:
            return False
        return (
            np.array_equal(mine.l, qp.l)
            and np.array_equal(mine.u, qp.u)
            and (mine.A != qp.A).nnz == 0
            and (mine.P != qp.P).nnz == 0
        )

    def warm_start(self, x: np.ndarray, y: Optional[np.ndarray] = None) -> None:
        """Load an unscaled primal (and dual) guess."""
        self.x = x / self.D
        self.z = np.clip(self.A @ self.x, self.l, self.u)
        self.y = np.zeros(self.qp.m) if y is None else self.c * y / self.E

    # -- residuals --------------------------------------------------------

    def _unscaled(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.D * x, self.E * y / self.c

    def _residuals(self, x: np.ndarray, z: np.ndarray, y: np.ndarray) -> tuple[float, float]:
        """Primal and dual residuals of the unscaled problem."""
        prim = _norm((self.A @ x - z) / self.E)
        dual = _norm((self.P @ x + self.q + self.A.T @ y) / self.D) / self.c
        return prim, dual

    def _scaled_ratio(self, x: np.ndarray, z: np.ndarray, y: np.ndarray) -> float:
        # Relative residuals of the equilibrated problem, the space rho acts in.
        ax = self.A @ x
        px = self.P @ x
        aty = self.A.T @ y
        prim = _norm(ax - z) / (max(_norm(ax), _norm(z)) + 1e-30)
        dual = _norm(px + self.q + aty) / (max(_norm(px), _norm(aty), _norm(self.q)) + 1e-30)
        return prim / (dual + 1e-30)

    def _true_residuals(self, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
        qp = self.qp
        prim = _norm(qp.violation(x)) if qp.m else 0.0
        dual = _norm(qp.P @ x + qp.q + qp.A.T @ y)
        return prim, dual

    # -- main loop --------------------------------------------------------

    def _report(
        self,
        x_s: np.ndarray,
        y_s: np.ndarray,
        status: SolverStatus,
        iters: int,
        polished: bool = False,
    ) -> SolveReport:
        x, y = self._unscaled(x_s, y_s)
        prim, dual = self._true_residuals(x, y)
        report = SolveReport(
            x=x,
            y=y,
            obj=self.qp.objective(x),
            status=status,
            prim_res=prim,
            dual_res=dual,
            iters=iters,
            polished=polished,
        )
        report._workspace = self
        return report

    def run(self) -> SolveReport:
        """Iterate from the stored state until optimal, infeasible or out of iterations."""
        s = self.settings
        alpha = s.alpha
        eps_polish = max(s.eps_admm, min(s.eps_prim, s.eps_dual))
        x, z, y = self.x, self.z, self.y
        n = self.qp.n

        for k in range(1, s.max_iter + 1):
            y_prev = y
            rhs = np.concatenate([s.sigma * x - self.q, z - y / self.rho_vec])
            sol = self.kkt.solve(rhs)
            x_tilde = sol[:n]
            z_tilde = z + (sol[n:] - y) / self.rho_vec
            x = alpha * x_tilde + (1.0 - alpha) * x
            z_relax = alpha * z_tilde + (1.0 - alpha) * z
            z = np.clip(z_relax + y / self.rho_vec, self.l, self.u)
            y = y + self.rho_vec * (z_relax - z)

            if k % s.check_interval and k != s.max_iter:
                continue

            self.x, self.z, self.y = x, z, y
            prim, dual = self._residuals(x, z, y)
            logger.debug("iter %6d  prim %.3e  dual %.3e  rho %.2e", k, prim, dual, self.rho)

            if prim <= s.eps_prim and dual <= s.eps_dual:
                report = self._report(x, y, SolverStatus.OPTIMAL, k)
                if report.prim_res <= s.eps_prim and report.dual_res <= s.eps_dual:
                    return report

            if s.polish and prim <= eps_polish and dual <= eps_polish:
                polished = self._polish(x, z, y)
                if polished is not None:
                    x_p, y_p = polished
                    self.x, self.y = x_p, y_p
                    self.z = np.clip(self.A @ x_p, self.l, self.u)
                    return self._report(x_p, y_p, SolverStatus.OPTIMAL, k, polished=True)
                logger.debug("Polish rejected at iter %d; tightening ADMM target", k)
                eps_polish = max(0.1 * eps_polish, min(s.eps_prim, s.eps_dual))

            if self._certifies_infeasibility(y - y_prev):
                logger.info("Primal infeasibility detected at iteration %d", k)
                return self._report(x, y, SolverStatus.INFEASIBLE, k)

            if s.adaptive_rho and k % s.adaptive_rho_interval == 0:
                self._update_rho(self._scaled_ratio(x, z, y))

        logger.warning("Solver reached max_iter=%d without converging", s.max_iter)
        self.x, self.z, self.y = x, z, y
        return self._report(x, y, SolverStatus.MAX_ITER, s.max_iter)

    def _update_rho(self, ratio: float) -> None:
        rho_new = float(np.clip(self.rho * np.sqrt(ratio), RHO_MIN, RHO_MAX))
        if rho_new > 5.0 * self.rho or rho_new < 0.2 * self.rho:
            logger.debug("rho %.3e -> %.3e", self.rho, rho_new)
            self.rho = rho_new
            self.rho_vec = self._rho_vector(rho_new)
            self._factor()

    def _certifies_infeasibility(self, dy: np.ndarray) -> bool:
        qp = self.qp
        dy = self.E * dy
        norm_dy = _norm(dy)
        if norm_dy <= self.settings.eps_prim_inf:
            return False
        dy = dy / norm_dy
        dy[np.abs(dy) < 1e-9] = 0.0
        eps = self.settings.eps_prim_inf
        if _norm(qp.A.T @ dy) > eps:
            return False
        support = qp.u[dy > 0] @ dy[dy > 0] + qp.l[dy < 0] @ dy[dy < 0]
        return bool(support < -eps)

    def _polish(
        self, x: np.ndarray, z: np.ndarray, y: np.ndarray
    ) -> Optional[tuple[np.ndarray, np.ndarray]]:
        """Solve the equality-constrained QP on the active set; None if it does not verify."""
        s = self.settings
        n = self.qp.n
        lower = ((z - self.l) < -y) & ~self.eq
        upper = ((self.u - z) < y) & ~self.eq
        active = lower | upper | self.eq
        rows = np.flatnonzero(active)
        A_act = self.A[rows]
        b = np.where(upper, self.u, self.l)[rows]
        n_act = rows.size

        delta = s.polish_delta
        K0 = sp.bmat(
            [[self.P, A_act.T], [A_act, sp.csc_matrix((n_act, n_act))]], format="csc"
        )
        K_reg = sp.bmat(
            [[self.P + delta * sp.identity(n), A_act.T], [A_act, -delta * sp.identity(n_act)]],
            format="csc",
        )
        try:
            lu = spla.splu(K_reg)
        except RuntimeError:
            return None
        rhs = np.concatenate([-self.q, b])
        sol = lu.solve(rhs)
        for _ in range(s.polish_refine_iter):
            sol = sol + lu.solve(rhs - K0 @ sol)
        if not np.all(np.isfinite(sol)):
            return None

        x_p = sol[:n]
        y_p = np.zeros(self.qp.m)
        y_p[rows] = sol[n:]

        x_u, y_u = self._unscaled(x_p, y_p)
        prim, dual = self._true_residuals(x_u, y_u)
        wrong_sign = max(_norm(np.maximum(y_u[lower], 0.0)), _norm(np.minimum(y_u[upper], 0.0)))
        if prim > s.eps_prim or dual > s.eps_dual or wrong_sign > s.eps_dual:
            logger.debug(
                "Polish failed: prim %.2e dual %.2e sign %.2e (active %d)",
                prim, dual, wrong_sign, n_act,
            )
            return None
        return x_p, y_p


SolveReport.model_rebuild()


def solve(
    qp: SparseQP,
    settings: Optional[SolverSettings] = None,
    warm_start: Optional[tuple[np.ndarray, Optional[np.ndarray]]] = None,
) -> SolveReport:
    """
    Solve a convex QP.

    Args:
        qp: Problem data
        settings: Solver settings; defaults to 1e-9 residual tolerances
        warm_start: Optional unscaled (x, y) starting pair

    Returns:
        SolveReport with status Optimal, MaxIter or Infeasible
    """
    settings = settings or SolverSettings()
    ws = Workspace(qp, settings)
    if warm_start is not None:
        ws.warm_start(*warm_start)
    report = ws.run()
    logger.debug(
        "solve: %s after %d iterations (prim %.2e, dual %.2e, polished=%s)",
        report.status.value, report.iters, report.prim_res, report.dual_res, report.polished,
    )
    return report


def solve_lp_objective_swap(qp: SparseQP, new_q: Any, warm: SolveReport) -> SolveReport:
    """
    Re-solve ``qp`` with cost ``new_q``, reusing the factorization and iterates of ``warm``.

    Falls back to a cold factorization when ``warm`` was produced for different
    constraint data.
    """
    target = qp.with_cost(new_q)
    ws = warm._workspace
    if ws is None or not ws.matches(qp):
        settings = ws.settings if ws is not None else None
        return solve(target, settings, warm_start=(warm.x, warm.y))
    return ws.with_cost(target).run()


# ----------------------------------------------------------------------------
# Plain-text interchange
# ----------------------------------------------------------------------------


def _fmt(v: float) -> str:
    if v >= INF:
        return "inf"
    if v <= -INF:
        return "-inf"
    return f"{v:.17g}"


def dump_qp(qp: SparseQP, path: Union[str, Path]) -> None:
    """
    Write ``qp`` as text: a header line, then P (upper triangle) and A as
    ``row col value`` triplets, then q, l and u one value per line.
    """
    P = sp.triu(qp.P).tocoo()
    A = qp.A.tocoo()
    lines = [f"{DUMP_HEADER} {qp.n} {qp.m} {P.nnz} {A.nnz}", "P"]
    lines += [f"{i} {j} {_fmt(v)}" for i, j, v in zip(P.row, P.col, P.data)]
    lines.append("A")
    lines += [f"{i} {j} {_fmt(v)}" for i, j, v in zip(A.row, A.col, A.data)]
    for name, vec in (("q", qp.q), ("l", qp.l), ("u", qp.u)):
        lines.append(name)
        lines += [_fmt(v) for v in vec]
    Path(path).write_text("\n".join(lines) + "\n")


def load_qp(path: Union[str, Path]) -> SparseQP:
    """Read a problem written by ``dump_qp``."""
    lines = Path(path).read_text().splitlines()
    header = lines[0].split()
    if " ".join(header[:2]) != DUMP_HEADER:
        raise ValueError(f"Not a QP dump: {path}")
    n, m, nnz_p, nnz_a = (int(v) for v in header[2:6])
    pos = 2

    def triplets(count: int, shape: tuple[int, int]) -> sp.csc_matrix:
        nonlocal pos
        rows = lines[pos : pos + count]
        pos += count + 1
        if not rows:
            return sp.csc_matrix(shape)
        i, j, v = zip(*(r.split() for r in rows))
        return sp.csc_matrix(
            (np.array(v, dtype=float), (np.array(i, dtype=int), np.array(j, dtype=int))),
            shape=shape,
        )

    P_upper = triplets(nnz_p, (n, n))
    A = triplets(nnz_a, (m, n))
    pos -= 1

    def vector(count: int) -> np.ndarray:
        nonlocal pos
        pos += 1
        values = np.array([float(v) for v in lines[pos : pos + count]])
        pos += count
        return values

    q, l, u = vector(n), vector(m), vector(m)
    P = P_upper + sp.triu(P_upper, k=1).T
    return SparseQP(P=P, q=q, A=A, l=l, u=u)
