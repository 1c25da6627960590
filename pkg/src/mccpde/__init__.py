"""
mccpde - McCormick relaxations for bilinear PDE-constrained optimal control.

Certified lower bounds from pointwise and locally averaged relaxations,
bound tightening, a-priori error constants, and matching upper bounds.
"""

__version__ = "0.1.0"
__app_name__ = "mccpde"

from mccpde.errors import McCormickError
from mccpde.models import ExperimentConfig, RelaxationKind
from mccpde.pipeline import ExperimentSummary, load_config, run_experiment

__all__ = [
    "run_experiment",
    "load_config",
    "ExperimentConfig",
    "ExperimentSummary",
    "McCormickError",
    "RelaxationKind",
]
