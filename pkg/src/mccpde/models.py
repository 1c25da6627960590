"""
Pydantic configuration models for mccpde.
"""

import os
from enum import Enum
from typing import Annotated, Any, Callable, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class SolverStatus(str, Enum):
    """Termination status of the convex solver."""

    OPTIMAL = "Optimal"
    MAX_ITER = "MaxIter"
    INFEASIBLE = "Infeasible"


class RelaxationKind(str, Enum):
    """Which McCormick program to build."""

    POINTWISE = "mcc"
    AVERAGED = "mcch"
    FULLY_AVERAGED = "mcchh"


class Mode(str, Enum):
    """Pipeline stages that an experiment can enable."""

    MCC = "mcc"
    MCCH_SWEEP = "mcch_sweep"
    OBBT = "obbt"
    CERTIFICATES = "certificates"
    UB_CONTINUOUS = "ub_continuous"
    UB_INTEGER = "ub_integer"
    ORACLE = "oracle"


class SolverSettings(BaseModel):
    """Settings of the operator-splitting QP solver."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    eps_prim: float = Field(default=1e-9, gt=0, description="Primal residual tolerance")
    eps_dual: float = Field(default=1e-9, gt=0, description="Dual residual tolerance")
    max_iter: int = Field(default=200_000, gt=0, description="Iteration cap")
    rho: float = Field(default=0.1, gt=0, description="Initial penalty parameter")
    sigma: float = Field(default=1e-6, gt=0, description="Primal regularization")
    alpha: float = Field(default=1.6, gt=0, lt=2, description="Over-relaxation factor")
    adaptive_rho: bool = Field(default=True, description="Rebalance the penalty")
    adaptive_rho_interval: int = Field(default=25, gt=0)
    scaling_iter: int = Field(default=10, ge=0, description="Ruiz equilibration passes")
    polish: bool = Field(default=True, description="Refine on the detected active set")
    polish_refine_iter: int = Field(default=5, ge=0)
    polish_delta: float = Field(default=1e-9, gt=0, description="Polish KKT regularization")
    eps_admm: float = Field(
        default=1e-5, gt=0, description="Residual level at which polishing is first tried"
    )
    eps_prim_inf: float = Field(default=1e-8, gt=0, description="Infeasibility tolerance")
    check_interval: int = Field(default=25, gt=0)


class ObbtSettings(BaseModel):
    """Settings of the bound-tightening sweeps."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    safeguard: float = Field(default=1e-7, gt=0, description="Margin added to every new bound")
    sweep_tol: float = Field(default=1e-6, gt=0, description="Stop when no bound moves more")
    max_sweeps: int = Field(default=50, gt=0)
    order: Literal["lo_then_hi"] = "lo_then_hi"
    parallel: bool = Field(default=False, description="Solve all cells of a pass concurrently")
    monotone_tol: float = Field(
        default=1e-9, ge=0, description="Relative slack for the nondecreasing objective trace"
    )

    @model_validator(mode="after")
    def check_tolerances(self) -> "ObbtSettings":
        if self.sweep_tol <= self.safeguard:
            raise ValueError("sweep_tol must exceed the safeguard margin")
        return self


class Segment(BaseModel):
    """Polynomial piece on (start, stop], coefficients in ascending powers of x."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    start: float = Field(..., ge=0, le=1)
    stop: float = Field(..., ge=0, le=1)
    coefficients: list[float] = Field(..., min_length=1)

    @model_validator(mode="after")
    def check_interval(self) -> "Segment":
        if self.stop <= self.start:
            raise ValueError(f"Segment stop {self.stop} must exceed start {self.start}")
        return self


class ConstantFunction(BaseModel):
    """Constant function descriptor."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["constant"] = "constant"
    value: float

    def to_callable(self) -> Callable[[np.ndarray], np.ndarray]:
        value = self.value
        return lambda x: np.full(np.shape(x), value)


class PiecewiseFunction(BaseModel):
    """
    Piecewise-polynomial function descriptor.

    Segments are contiguous, half-open on the left, and cover [0, 1]; the point
    x = 0 belongs to the first segment.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["piecewise"] = "piecewise"
    scale: float = 1.0
    segments: list[Segment] = Field(..., min_length=1)

    @field_validator("segments")
    @classmethod
    def validate_segments(cls, v: list[Segment]) -> list[Segment]:
        """Segments must tile [0, 1] in order."""
        if v[0].start != 0.0 or v[-1].stop != 1.0:
            raise ValueError("Segments must start at 0 and end at 1")
        for left, right in zip(v, v[1:]):
            if left.stop != right.start:
                raise ValueError(f"Gap or overlap between segments at {left.stop}")
        return v

    def to_callable(self) -> Callable[[np.ndarray], np.ndarray]:
        edges = np.array([s.start for s in self.segments] + [1.0])
        polys = [np.polynomial.Polynomial(s.coefficients) for s in self.segments]
        scale = self.scale

        def evaluate(x: Any) -> np.ndarray:
            x = np.asarray(x, dtype=float)
            index = np.clip(np.searchsorted(edges, x, side="left") - 1, 0, len(polys) - 1)
            out = np.empty_like(x)
            for k, poly in enumerate(polys):
                mask = index == k
                out[mask] = poly(x[mask])
            return scale * out

        return evaluate


FunctionSpec = Annotated[
    Union[ConstantFunction, PiecewiseFunction], Field(discriminator="kind")
]


class OracleSettings(BaseModel):
    """Brute-force enumeration settings for toy instances."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_cells: int = Field(default=4, gt=0, le=6)
    values: list[int] = Field(default_factory=lambda: list(range(-4, 5)), min_length=1)
    fem_n: int = Field(default=64, gt=1)
    n_instances: int = Field(default=10, gt=0)
    state: Literal["averaged", "pointwise"] = "averaged"
    seed: int = 0


class ExperimentConfig(BaseModel):
    """A complete experiment, read from a TOML file."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = Field(default="experiment", description="Used to name output files")
    reference: Optional[str] = Field(
        default=None, description="Bundled instance whose known values are reported alongside"
    )
    fem_n: int = Field(default=2048, gt=1, description="FEM cells N")
    coarse_levels: list[int] = Field(default_factory=lambda: [8, 16, 32], min_length=1)
    w_lo: float = -4.0
    w_hi: float = 4.0
    alpha: float = Field(default=2.5e-4, ge=0)
    f_spec: FunctionSpec = Field(default_factory=lambda: ConstantFunction(value=6.0))
    u_d_spec: FunctionSpec = Field(default_factory=lambda: ConstantFunction(value=0.0))
    u_bound: Optional[float] = Field(
        default=None, gt=0, description="Initial |u| bound; derived from the source if unset"
    )
    j0_tight: Optional[float] = Field(
        default=None, ge=0, description="Known lower bound on the tracking term for tight c_quad"
    )
    primal_value: Optional[float] = Field(
        default=None, gt=0, description="Known objective of a feasible control for c_quad"
    )
    obbt: ObbtSettings = Field(default_factory=ObbtSettings)
    solver: SolverSettings = Field(default_factory=SolverSettings)
    oracle: OracleSettings = Field(default_factory=OracleSettings)
    modes: set[Mode] = Field(..., min_length=1)
    long_running: bool = False
    long_running_level: int = Field(
        default=64, gt=0, description="Levels with at least this many cells need long_running"
    )
    ub_start: Optional[float] = Field(default=None, description="Constant start control")
    ub_cells: Optional[int] = Field(
        default=None, gt=0, description="Control grid of the upper bounds; finest level if unset"
    )
    ub_method: Literal["l-bfgs-b", "projected-gradient"] = "l-bfgs-b"

    @field_validator("coarse_levels")
    @classmethod
    def validate_levels(cls, v: list[int]) -> list[int]:
        """Levels must be positive and strictly increasing."""
        if any(n <= 0 for n in v):
            raise ValueError("Coarse levels must be positive")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("Coarse levels must be strictly increasing")
        return v

    @model_validator(mode="after")
    def check_grids(self) -> "ExperimentConfig":
        bad = [n for n in self.coarse_levels if self.fem_n % n]
        if bad:
            raise ValueError(f"Coarse levels {bad} do not divide fem_n={self.fem_n}")
        if self.w_lo > self.w_hi:
            raise ValueError("w_lo must not exceed w_hi")
        if self.ub_cells is not None and self.fem_n % self.ub_cells:
            raise ValueError(f"ub_cells={self.ub_cells} does not divide fem_n={self.fem_n}")
        return self


class RuntimeSettings(BaseSettings):
    """Environment knobs, read from MCCPDE_* variables."""

    model_config = SettingsConfigDict(env_prefix="MCCPDE_")

    threads: int = Field(default_factory=lambda: os.cpu_count() or 1, gt=0)
    log_level: str = "WARNING"

    @field_validator("log_level", mode="before")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Normalize level name."""
        return str(v).upper().strip()
