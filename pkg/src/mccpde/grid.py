"""
Uniform partitions of (0, 1), piecewise-constant and P1 nodal functions,
the cell-averaging projection and discrete total variation.
"""

from typing import Any, Callable, Union

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from mccpde.errors import IncompatibleGrids, NonUniformGrid

# 3-point Gauss-Legendre rule on the reference cell [0, 1]
GAUSS_POINTS = np.array([0.5 - np.sqrt(0.15), 0.5, 0.5 + np.sqrt(0.15)])
GAUSS_WEIGHTS = np.array([5.0, 8.0, 5.0]) / 18.0

UNIFORM_TOL = 1e-14


def _readonly(values: Any) -> np.ndarray:
    array = np.array(values, dtype=float, copy=True).reshape(-1)
    array.setflags(write=False)
    return array


class Partition(BaseModel):
    """Uniform partition of (0, 1) into n_cells intervals."""

    model_config = ConfigDict(frozen=True)

    n_cells: int = Field(..., gt=0, description="Number of cells N_h")

    @property
    def h(self) -> float:
        """Cell width."""
        return 1.0 / self.n_cells

    @property
    def cell_edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_cells + 1)

    @property
    def midpoints(self) -> np.ndarray:
        return (np.arange(self.n_cells) + 0.5) * self.h

    @classmethod
    def from_edges(cls, edges: Any) -> "Partition":
        """
        Build a partition from explicit cell edges.

        Args:
            edges: Increasing sequence from 0 to 1

        Returns:
            The matching uniform Partition

        Raises:
            NonUniformGrid: If the edges are not uniform on [0, 1]
        """
        edges = np.asarray(edges, dtype=float)
        if edges.ndim != 1 or edges.size < 2:
            raise NonUniformGrid("A partition needs at least two edges")
        if edges[0] != 0.0 or edges[-1] != 1.0:
            raise NonUniformGrid(f"Edges must span [0, 1], got [{edges[0]}, {edges[-1]}]")
        n_cells = edges.size - 1
        widths = np.diff(edges)
        if np.any(widths <= 0.0) or np.max(np.abs(widths - 1.0 / n_cells)) > UNIFORM_TOL:
            raise NonUniformGrid("Only uniform partitions of (0, 1) are supported")
        return cls(n_cells=n_cells)

    def ratio_to(self, fine: "Partition") -> int:
        """
        Number of cells of ``fine`` inside each cell of this partition.

        Raises:
            IncompatibleGrids: If ``fine`` does not refine this partition
        """
        if fine.n_cells % self.n_cells != 0:
            raise IncompatibleGrids(
                f"Grid with {fine.n_cells} cells is not a refinement of "
                f"the grid with {self.n_cells} cells"
            )
        return fine.n_cells // self.n_cells


class CellFunction(BaseModel):
    """Piecewise-constant function, one value per cell."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    partition: Partition
    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def validate_values(cls, v: Any) -> np.ndarray:
        """Store values as a read-only float array."""
        return _readonly(v)

    @model_validator(mode="after")
    def check_length(self) -> "CellFunction":
        if self.values.size != self.partition.n_cells:
            raise ValueError(
                f"Expected {self.partition.n_cells} cell values, got {self.values.size}"
            )
        return self

    @classmethod
    def constant(cls, partition: Partition, value: float) -> "CellFunction":
        return cls(partition=partition, values=np.full(partition.n_cells, float(value)))

    def __len__(self) -> int:
        return self.values.size

    def l1_norm(self) -> float:
        return float(self.partition.h * np.abs(self.values).sum())

    def l2_norm(self) -> float:
        return float(np.sqrt(self.partition.h * np.dot(self.values, self.values)))

    def linf_norm(self) -> float:
        return float(np.abs(self.values).max())

    def with_values(self, values: Any) -> "CellFunction":
        return CellFunction(partition=self.partition, values=values)


class NodalFunction(BaseModel):
    """Continuous piecewise-linear (P1) function given by its nodal values."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    partition: Partition
    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def validate_values(cls, v: Any) -> np.ndarray:
        """Store values as a read-only float array."""
        return _readonly(v)

    @model_validator(mode="after")
    def check_length(self) -> "NodalFunction":
        if self.values.size != self.partition.n_cells + 1:
            raise ValueError(
                f"Expected {self.partition.n_cells + 1} nodal values, got {self.values.size}"
            )
        return self

    @classmethod
    def from_interior(cls, partition: Partition, interior: Any) -> "NodalFunction":
        """Pad interior degrees of freedom with homogeneous Dirichlet values."""
        values = np.zeros(partition.n_cells + 1)
        values[1:-1] = interior
        return cls(partition=partition, values=values)

    @classmethod
    def interpolate(cls, partition: Partition, fn: Callable[[np.ndarray], Any]) -> "NodalFunction":
        """Nodal interpolant of a vectorized callable."""
        nodes = partition.cell_edges
        return cls(partition=partition, values=np.broadcast_to(fn(nodes), nodes.shape))

    @property
    def interior(self) -> np.ndarray:
        return self.values[1:-1]

    @property
    def is_dirichlet(self) -> bool:
        return self.values[0] == 0.0 and self.values[-1] == 0.0

    def l2_norm(self) -> float:
        """Exact L2 norm of the P1 interpolant."""
        a, b = self.values[:-1], self.values[1:]
        return float(np.sqrt(self.partition.h / 3.0 * np.sum(a * a + a * b + b * b)))

    def h1_seminorm(self) -> float:
        """Exact L2 norm of the derivative."""
        return float(np.sqrt(np.sum(np.diff(self.values) ** 2) / self.partition.h))

    def cell_averages(self) -> np.ndarray:
        return 0.5 * (self.values[:-1] + self.values[1:])


GridSource = Union[NodalFunction, CellFunction, Callable[[np.ndarray], Any]]


def gauss_nodes(partition: Partition) -> np.ndarray:
    """Quadrature points, shape (n_cells, 3)."""
    left = partition.cell_edges[:-1]
    return left[:, None] + partition.h * GAUSS_POINTS[None, :]


def project_avg(f: GridSource, target: Partition) -> CellFunction:
    """
    Cell-averaging projection P_h onto ``target``.

    Exact for P1 and piecewise-constant inputs. Callables are averaged with a
    3-point Gauss rule per target cell and must accept numpy arrays.

    Args:
        f: Nodal function, cell function or vectorized callable
        target: Partition to project onto

    Returns:
        CellFunction of cell means on ``target``

    Raises:
        IncompatibleGrids: If the source resolution is not a multiple of the target's
    """
    if isinstance(f, CellFunction):
        r = target.ratio_to(f.partition)
        means = f.values.reshape(target.n_cells, r).mean(axis=1)
        return CellFunction(partition=target, values=means)
    if isinstance(f, NodalFunction):
        r = target.ratio_to(f.partition)
        fine = f.cell_averages()
        return CellFunction(partition=target, values=fine.reshape(target.n_cells, r).mean(axis=1))
    points = gauss_nodes(target)
    samples = np.broadcast_to(np.asarray(f(points), dtype=float), points.shape)
    return CellFunction(partition=target, values=samples @ GAUSS_WEIGHTS)


def prolong(w: CellFunction, target: Partition) -> CellFunction:
    """
    Piecewise-constant injection of ``w`` onto a finer partition.

    Raises:
        IncompatibleGrids: If ``target`` does not refine the grid of ``w``
    """
    r = w.partition.ratio_to(target)
    return CellFunction(partition=target, values=np.repeat(w.values, r))


def transfer(w: CellFunction, target: Partition) -> CellFunction:
    """Average onto a coarser grid or inject onto a finer one."""
    if w.partition.n_cells >= target.n_cells:
        return project_avg(w, target)
    return prolong(w, target)


def tv(w: CellFunction) -> float:
    """Total variation: sum of the interior jump heights."""
    return float(np.abs(np.diff(w.values)).sum())


def refine(p: Partition) -> Partition:
    """Uniform refinement; doubles the cell count."""
    return Partition(n_cells=2 * p.n_cells)


def averaging_matrix(source: Partition, target: Partition) -> sp.csr_matrix:
    """Sparse cell-to-cell averaging map, shape (target.n_cells, source.n_cells)."""
    r = target.ratio_to(source)
    rows = np.repeat(np.arange(target.n_cells), r)
    cols = np.arange(source.n_cells)
    data = np.full(source.n_cells, 1.0 / r)
    return sp.csr_matrix((data, (rows, cols)), shape=(target.n_cells, source.n_cells))


def nodal_averaging_matrix(fem: Partition, target: Partition) -> sp.csr_matrix:
    """
    Sparse map from all fem nodal values to cell means on ``target``.

    Shape (target.n_cells, fem.n_cells + 1).
    """
    r = target.ratio_to(fem)
    fine = np.arange(fem.n_cells)
    rows = np.concatenate([fine // r, fine // r])
    cols = np.concatenate([fine, fine + 1])
    data = np.full(2 * fem.n_cells, 0.5 / r)
    return sp.coo_matrix(
        (data, (rows, cols)), shape=(target.n_cells, fem.n_cells + 1)
    ).tocsr()
