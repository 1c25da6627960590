"""Pytest fixtures for mccpde tests."""

import numpy as np
import pytest

from mccpde.fem1d import PdeProblem
from mccpde.grid import CellFunction, NodalFunction, Partition
from mccpde.models import RelaxationKind
from mccpde.relaxation import Envelope, RelaxationSpec


def pytest_addoption(parser: pytest.Parser) -> None:
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Run full-scale reproductions at N = 2048",
    )


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng() -> np.random.Generator:
    """Return a seeded random generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def fem() -> Partition:
    """Return a small FEM grid."""
    return Partition(n_cells=32)


@pytest.fixture
def coarse() -> Partition:
    """Return a coarse grid that divides the FEM grid."""
    return Partition(n_cells=4)


@pytest.fixture
def problem(fem: Partition, coarse: Partition) -> PdeProblem:
    """Return f = 6, w in [-4, 4] on the small grids."""
    return PdeProblem(f=6.0, w_bounds=(-4.0, 4.0), fem_grid=fem, control_grid=coarse)


@pytest.fixture
def pointwise_problem(fem: Partition) -> PdeProblem:
    """Return f = 6, w in [-4, 4] with the control on the FEM grid."""
    return PdeProblem(f=6.0, w_bounds=(-4.0, 4.0), fem_grid=fem, control_grid=fem)


@pytest.fixture
def target(fem: Partition) -> NodalFunction:
    """Return a smooth tracking target."""
    return NodalFunction.interpolate(fem, lambda x: np.sin(np.pi * x))


@pytest.fixture
def u_bound() -> float:
    """Return the a-priori L-infinity bound for f = 6, |w| <= 4."""
    return 6.0 / (2.0 * (1.0 - 4.0 / np.pi**2))


@pytest.fixture
def averaged_spec(
    problem: PdeProblem, coarse: Partition, target: NodalFunction, u_bound: float
) -> RelaxationSpec:
    """Return the fully averaged relaxation on the conservative envelope."""
    env = Envelope.uniform(coarse, u_bound, problem.w_bounds)
    return RelaxationSpec(
        kind=RelaxationKind.FULLY_AVERAGED, prob=problem, env=env, alpha=1e-3, u_d=target
    )


@pytest.fixture
def sample_control(coarse: Partition) -> CellFunction:
    """Return an integer control on the coarse grid."""
    return CellFunction(partition=coarse, values=[-4.0, 1.0, 3.0, -2.0])
