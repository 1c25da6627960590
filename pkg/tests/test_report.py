"""Tests for CSV, JSON and SVG writers."""

import csv
import json
from pathlib import Path

import numpy as np

from mccpde.grid import CellFunction, Partition
from mccpde.report import (
    Series,
    line_chart_svg,
    step_band,
    step_curve,
    write_csv,
    write_json,
    write_svg,
)
from mccpde.utils import format_sci


class TestWriters:
    """Tests for tabular and JSON output."""

    def test_csv_uses_repr_and_blanks(self, tmp_path: Path) -> None:
        """Test float formatting and empty cells for None."""
        path = write_csv(tmp_path / "t.csv", ["name", "value", "note"], [["a", 0.1, None]])
        with path.open() as fh:
            rows = list(csv.reader(fh))
        assert rows == [["name", "value", "note"], ["a", "0.1", ""]]

    def test_csv_numpy_floats(self, tmp_path: Path) -> None:
        """Test that numpy scalars round-trip exactly."""
        value = np.float64(1.0) / 3.0
        path = write_csv(tmp_path / "t.csv", ["v"], [[value]])
        assert float(path.read_text().splitlines()[1]) == value

    def test_json_dict_sorted(self, tmp_path: Path) -> None:
        """Test that dict keys are sorted."""
        path = write_json(tmp_path / "d.json", {"b": 1, "a": np.float64(2.0)})
        text = path.read_text()
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text) == {"a": 2.0, "b": 1}

    def test_json_model(self, tmp_path: Path) -> None:
        """Test pydantic models are dumped with their fields."""
        path = write_json(tmp_path / "p.json", Partition(n_cells=4))
        assert json.loads(path.read_text())["n_cells"] == 4


class TestCharts:
    """Tests for the SVG helpers."""

    def test_step_curve(self) -> None:
        """Test breakpoints of a piecewise constant."""
        cf = CellFunction(partition=Partition(n_cells=2), values=[1.0, 3.0])
        x, y = step_curve(cf)
        np.testing.assert_array_equal(x, [0.0, 0.5, 0.5, 1.0])
        np.testing.assert_array_equal(y, [1.0, 1.0, 3.0, 3.0])

    def test_chart_contents(self, tmp_path: Path) -> None:
        """Test a chart with one band and one dashed series."""
        p = Partition(n_cells=4)
        band = step_band(
            "u bounds", CellFunction.constant(p, -1.0), CellFunction.constant(p, 1.0)
        )
        series = Series(
            label="u < u_d & more", x=p.cell_edges, y=np.sin(p.cell_edges), dashed=True
        )
        svg = line_chart_svg(f"m = {format_sci(0.0837)}", [series], [band], y_label="u")
        assert svg.startswith("<svg")
        assert svg.rstrip().endswith("</svg>")
        assert "<polygon" in svg
        assert "<polyline" in svg
        assert 'stroke-dasharray="6,4"' in svg
        assert "u &lt; u_d &amp; more" in svg
        path = write_svg(tmp_path / "chart.svg", svg)
        assert path.read_text() == svg

    def test_flat_series(self) -> None:
        """Test that a constant series still renders."""
        x = np.linspace(0.0, 1.0, 5)
        svg = line_chart_svg("flat", [Series(label="zero", x=x, y=np.zeros(5))])
        assert "nan" not in svg
