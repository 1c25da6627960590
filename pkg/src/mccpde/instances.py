"""
Bundled problem instances for mccpde.
"""

from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

from mccpde.fem1d import PdeProblem
from mccpde.grid import NodalFunction, Partition
from mccpde.models import (
    ConstantFunction,
    ExperimentConfig,
    FunctionSpec,
    PiecewiseFunction,
    Segment,
)


class InstanceConfig(BaseModel):
    """Data of a named instance and the values it is known to reach."""

    model_config = ConfigDict(frozen=True)

    name: str
    description: str
    f_spec: FunctionSpec
    u_d_spec: FunctionSpec
    w_lo: float
    w_hi: float
    alpha: float
    reference: dict[str, float] = Field(default_factory=dict)


# Tracking target of the benchmark: a bump with a plateau of height 2 on (0.4, 0.6].
# Intervals are half-open on the left; x = 0 belongs to the first segment.
BENCHMARK_TARGET = PiecewiseFunction(
    scale=1.0,
    segments=[
        Segment(start=0.0, stop=0.25, coefficients=[0.0, 1.5, -1.5]),
        Segment(start=0.25, stop=0.4, coefficients=[-0.46875, 3.0]),
        Segment(start=0.4, stop=0.6, coefficients=[2.0]),
        Segment(start=0.6, stop=0.75, coefficients=[2.53125, -3.0]),
        Segment(start=0.75, stop=1.0, coefficients=[0.0, 1.5, -1.5]),
    ],
)

INSTANCES: dict[str, InstanceConfig] = {
    "benchmark_1d": InstanceConfig(
        name="benchmark_1d",
        description="f = 6, w in [-4, 4], alpha = 2.5e-4, plateau tracking target",
        f_spec=ConstantFunction(value=6.0),
        u_d_spec=BENCHMARK_TARGET,
        w_lo=-4.0,
        w_hi=4.0,
        alpha=2.5e-4,
        reference={
            "mcc_conservative": 6.8649e-2,
            "mcc_alpha0": 6.7701e-2,
            "mcc_tightest": 8.3679e-2,
            "ub_continuous": 8.3808e-2,
            "ub_integer": 8.5551e-2,
            "mcchh_8": 7.1532e-2,
            "mcchh_16": 7.0280e-2,
            "mcchh_32": 6.8681e-2,
            "mcchh_obbt_8": 8.3730e-2,
            "mcchh_obbt_16": 8.3702e-2,
            "mcchh_obbt_32": 8.3681e-2,
            "u_bound": 5.0444,
            "c_quad_conservative": 5.6026e4,
            "c_quad_tight": 1.1317e3,
        },
    ),
    "toy": InstanceConfig(
        name="toy",
        description="Benchmark data on a coarse grid for brute-force enumeration",
        f_spec=ConstantFunction(value=6.0),
        u_d_spec=BENCHMARK_TARGET,
        w_lo=-4.0,
        w_hi=4.0,
        alpha=2.5e-4,
    ),
}


def get_instance(name: str) -> Optional[InstanceConfig]:
    """Get instance configuration by name."""
    return INSTANCES.get(name.lower())


def get_supported_instances() -> list[str]:
    """Get list of bundled instance names."""
    return list(INSTANCES.keys())


def build_problem(
    config: ExperimentConfig, control_cells: Optional[int] = None
) -> tuple[PdeProblem, NodalFunction]:
    """
    Problem data and nodal tracking target for an experiment.

    Args:
        config: Experiment configuration
        control_cells: Control grid size; defaults to the FEM grid

    Returns:
        Tuple of (problem, tracking target on the FEM grid)
    """
    fem = Partition(n_cells=config.fem_n)
    control = Partition(n_cells=control_cells) if control_cells else fem
    f_spec = config.f_spec
    source = f_spec.value if isinstance(f_spec, ConstantFunction) else f_spec.to_callable()
    prob = PdeProblem(
        f=source, w_bounds=(config.w_lo, config.w_hi), fem_grid=fem, control_grid=control
    )
    u_d = NodalFunction.interpolate(fem, config.u_d_spec.to_callable())
    return prob, u_d
