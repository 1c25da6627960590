"""
Brute-force ground truth on toy instances.

Enumerates every integer control on a few cells, and checks the chain
relaxation optimum - c_quad h^2 <= enumerated optimum together with the
feasibility of every enumerated control in the relaxation.
"""

import csv
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from mccpde.certificates import c_quad, embedding_bounds, validated_lower_bound
from mccpde.errors import BudgetExceeded
from mccpde.fem1d import PdeProblem, source_l2_norm
from mccpde.grid import CellFunction, NodalFunction, Partition
from mccpde.models import (
    ObbtSettings,
    OracleSettings,
    RelaxationKind,
    RuntimeSettings,
    SolverSettings,
)
from mccpde.obbt import lower_bound_after_obbt
from mccpde.relaxation import Envelope, RelaxationSpec, build, embed_point
from mccpde.upper_bounds import evaluate, solve_integer

logger = logging.getLogger(__name__)

MAX_EVALUATIONS = 1_000_000
EMBED_TOL = 1e-10


class EnumerationSpec(BaseModel):
    """Which integer controls to enumerate."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_cells: int = Field(..., gt=0, le=6)
    value_set: list[int] = Field(..., min_length=1)
    fem_n: int = Field(default=64, gt=1)
    state: Literal["averaged", "pointwise"] = "averaged"

    @model_validator(mode="after")
    def check_grids(self) -> "EnumerationSpec":
        if self.fem_n % self.n_cells:
            raise ValueError(f"n_cells={self.n_cells} does not divide fem_n={self.fem_n}")
        return self

    @property
    def size(self) -> int:
        return len(self.value_set) ** self.n_cells

    @classmethod
    def from_settings(cls, settings: OracleSettings) -> "EnumerationSpec":
        return cls(
            n_cells=settings.n_cells,
            value_set=settings.values,
            fem_n=settings.fem_n,
            state=settings.state,
        )


class EnumerationResult(BaseModel):
    """Exact optimum over the enumerated set and the full value table."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    w_star: CellFunction
    obj_star: float
    controls: np.ndarray
    objectives: np.ndarray


class ToyInstance(BaseModel):
    """A small random problem for the oracle."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    seed: int
    prob: PdeProblem
    u_d: NodalFunction
    alpha: float


class BoundChainCheck(BaseModel):
    """Outcome of the end-to-end bound-validity check on one instance."""

    obj_star: float
    m_before: float
    m_obbt: float
    c_quad: float
    h: float
    validated: float
    max_embed_violation: float
    passed: bool


class HeuristicQuality(BaseModel):
    """How often the integer heuristic reaches the enumerated optimum."""

    n_instances: int
    n_optimal: int
    gaps: list[float]
    violations: int = Field(..., description="Heuristic values below the enumerated optimum")

    @property
    def ratio(self) -> float:
        return self.n_optimal / self.n_instances if self.n_instances else 0.0


def toy_problem(
    spec: EnumerationSpec, f: float = 6.0, w_bounds: tuple[float, float] = (-4.0, 4.0)
) -> PdeProblem:
    """Problem on the oracle's FEM grid with the enumeration cells as control grid."""
    return PdeProblem(
        f=f,
        w_bounds=w_bounds,
        fem_grid=Partition(n_cells=spec.fem_n),
        control_grid=Partition(n_cells=spec.n_cells),
    )


def enumerate_optimum(
    spec: EnumerationSpec,
    prob: PdeProblem,
    u_d: NodalFunction,
    alpha: float,
    threads: Optional[int] = None,
    reverse: bool = False,
) -> EnumerationResult:
    """
    Evaluate the objective of every integer control in the enumeration set.

    Controls are generated in lexicographic order of ``value_set`` (reversed if
    ``reverse``); ties resolve to the first control in that order.

    Raises:
        BudgetExceeded: If the set holds more than one million controls
    """
    if spec.size > MAX_EVALUATIONS:
        raise BudgetExceeded(
            f"{len(spec.value_set)}^{spec.n_cells} = {spec.size} controls exceed the cap "
            f"of {MAX_EVALUATIONS}"
        )
    values = sorted(spec.value_set)
    controls = np.array(list(itertools.product(values, repeat=spec.n_cells)), dtype=float)
    if reverse:
        controls = controls[::-1].copy()

    grid = prob.control_grid
    averaged = spec.state == "averaged"

    def run(chunk: np.ndarray) -> np.ndarray:
        return np.array(
            [
                evaluate(prob, u_d, alpha, CellFunction(partition=grid, values=w), averaged)
                for w in chunk
            ]
        )

    threads = threads or RuntimeSettings().threads
    chunks = np.array_split(controls, max(1, min(threads, len(controls))))
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        objectives = np.concatenate(list(pool.map(run, chunks)))

    best = int(np.argmin(objectives))
    logger.info("Enumerated %d controls; optimum %.10e", len(controls), objectives[best])
    return EnumerationResult(
        w_star=CellFunction(partition=grid, values=controls[best]),
        obj_star=float(objectives[best]),
        controls=controls,
        objectives=objectives,
    )


def write_table_csv(result: EnumerationResult, path: Union[str, Path]) -> None:
    """One row per control: the cell values and the objective."""
    n_cells = result.controls.shape[1]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"w{i}" for i in range(n_cells)] + ["objective"])
        for w, obj in zip(result.controls, result.objectives):
            writer.writerow([int(v) for v in w] + [repr(float(obj))])


def random_toy_instance(seed: int, settings: Optional[OracleSettings] = None) -> ToyInstance:
    """Constant source, smooth random target and log-uniform TV weight from ``seed``."""
    settings = settings or OracleSettings()
    rng = np.random.default_rng(seed)
    spec = EnumerationSpec.from_settings(settings)
    prob = toy_problem(spec, f=float(rng.uniform(2.0, 8.0)))
    a, b = rng.uniform(0.0, 1.0), rng.uniform(-0.3, 0.3)
    u_d = NodalFunction.interpolate(
        prob.fem_grid, lambda x: a * np.sin(np.pi * x) + b * np.sin(2.0 * np.pi * x)
    )
    alpha = float(10.0 ** rng.uniform(-4.0, -2.0))
    return ToyInstance(seed=seed, prob=prob, u_d=u_d, alpha=alpha)


def max_embed_violation(spec: RelaxationSpec, controls: np.ndarray) -> float:
    """Largest constraint violation of the embedded points of ``controls``."""
    built = build(spec)
    grid = spec.prob.control_grid
    worst = 0.0
    for w in controls:
        x = embed_point(built, CellFunction(partition=grid, values=w))
        violation = built.qp.violation(x)
        if violation.size:
            worst = max(worst, float(violation.max()))
    return worst


def check_bound_chain(
    instance: ToyInstance,
    spec: EnumerationSpec,
    obbt: Optional[ObbtSettings] = None,
    solver: Optional[SolverSettings] = None,
    enumeration: Optional[EnumerationResult] = None,
    check_embedding: bool = True,
) -> BoundChainCheck:
    """
    Verify m(after tightening) - c_quad h^2 <= enumerated optimum on one toy instance.

    The relaxation is the fully averaged one on the enumeration cells, started
    from the conservative a-priori envelope.
    """
    prob, u_d, alpha = instance.prob, instance.u_d, instance.alpha
    enumeration = enumeration or enumerate_optimum(spec, prob, u_d, alpha)
    coarse = prob.control_grid

    bound = embedding_bounds(prob.w_lo, prob.w_hi, source_l2_norm(prob)).linf
    env = Envelope.uniform(coarse, bound, prob.w_bounds)
    relax = RelaxationSpec(
        kind=RelaxationKind.FULLY_AVERAGED, prob=prob, env=env, alpha=alpha, u_d=u_d
    )
    embed = max_embed_violation(relax, enumeration.controls) if check_embedding else 0.0

    outcome = lower_bound_after_obbt(relax, obbt, solver)
    constant = c_quad(prob, enumeration.w_star, 0.0, outcome.env, u_d, alpha)
    validated = validated_lower_bound(outcome.m, constant, coarse.h)
    passed = validated.value <= enumeration.obj_star and outcome.m <= enumeration.obj_star + 1e-8
    passed = passed and embed <= EMBED_TOL
    check = BoundChainCheck(
        obj_star=enumeration.obj_star,
        m_before=outcome.m_before,
        m_obbt=outcome.m,
        c_quad=constant,
        h=coarse.h,
        validated=validated.value,
        max_embed_violation=embed,
        passed=passed,
    )
    logger.info(
        "Bound chain: validated %.6e <= m %.6e <= optimum %.6e: %s",
        check.validated, check.m_obbt, check.obj_star, "PASS" if passed else "FAIL",
    )
    return check


def heuristic_quality(
    instances: list[ToyInstance],
    spec: EnumerationSpec,
    tol: float = 1e-12,
) -> HeuristicQuality:
    """Compare the integer heuristic against enumeration on each instance."""
    averaged = spec.state == "averaged"
    gaps, optimal, violations = [], 0, 0
    for inst in instances:
        exact = enumerate_optimum(spec, inst.prob, inst.u_d, inst.alpha)
        heuristic = solve_integer(inst.prob, inst.u_d, inst.alpha, averaged=averaged)
        gap = heuristic.obj_nonsmooth - exact.obj_star
        gaps.append(gap)
        if gap < -tol * max(1.0, abs(exact.obj_star)):
            violations += 1
        elif gap <= tol * max(1.0, abs(exact.obj_star)):
            optimal += 1
    return HeuristicQuality(
        n_instances=len(instances), n_optimal=optimal, gaps=gaps, violations=violations
    )
