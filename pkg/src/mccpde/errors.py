"""
Exception hierarchy for mccpde.

Every error carries a human-readable message and a machine-readable code so the
CLI can map it to an exit status and a JSON payload.
"""

from typing import Optional


class McCormickError(Exception):
    """Base exception for all mccpde errors."""

    code = "UNKNOWN_ERROR"

    def __init__(self, message: str, code: Optional[str] = None):
        self.message = message
        if code is not None:
            self.code = code
        super().__init__(message)


class ConfigError(McCormickError):
    """Experiment configuration could not be read or is invalid."""

    code = "CONFIG_ERROR"


class IncompatibleGrids(McCormickError):
    """Source resolution is not a multiple of the target resolution."""

    code = "INCOMPATIBLE_GRIDS"


class NonUniformGrid(McCormickError):
    """Cell edges do not describe a uniform partition of (0, 1)."""

    code = "NON_UNIFORM_GRID"


class SingularSystem(McCormickError):
    """A state or adjoint system could not be factorized."""

    code = "SINGULAR_SYSTEM"


class SpecMismatch(McCormickError):
    """Relaxation inputs live on incompatible grids."""

    code = "SPEC_MISMATCH"


class SolverFailure(McCormickError):
    """The convex solver did not reach an optimal solution."""

    code = "SOLVER_FAILURE"


class InfeasibleProblem(SolverFailure):
    """The convex solver certified primal infeasibility."""

    code = "INFEASIBLE"


class InfeasibleEnvelope(SolverFailure):
    """A bound-tightening LP was infeasible; the safeguard margin was too small."""

    code = "INFEASIBLE_ENVELOPE"


class BoundsCrossed(SolverFailure):
    """A tightened lower state bound exceeded the matching upper bound."""

    code = "BOUNDS_CROSSED"


class MonotonicityViolation(SolverFailure):
    """Relaxation objective decreased between two tightening sweeps."""

    code = "MONOTONICITY_VIOLATION"


class CoercivityLost(McCormickError):
    """Control bounds leave the range in which the state equation is coercive."""

    code = "COERCIVITY_LOST"


class BudgetExceeded(McCormickError):
    """Brute-force enumeration would exceed its cap."""

    code = "BUDGET_EXCEEDED"


class NonpositiveLower(McCormickError):
    """Relative gap requested against a lower bound that is not positive."""

    code = "NONPOSITIVE_LOWER"


# Errors raised by numerical solves rather than by bad input.
SOLVER_ERRORS: tuple[type[McCormickError], ...] = (
    SolverFailure,
    SingularSystem,
)
