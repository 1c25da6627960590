"""Tests for utility functions."""

import pytest

from mccpde.errors import NonpositiveLower
from mccpde.utils import format_mesh_size, format_sci, format_seconds, parse_mesh_size, table_gap


class TestTableGap:
    """Tests for table_gap function."""

    def test_relative_gap(self) -> None:
        """Test (upper - lower) / lower."""
        assert table_gap(8.3808e-2, 8.3679e-2) == pytest.approx(1.5416e-3, rel=1e-3)
        assert table_gap(2.0, 2.0) == 0.0

    def test_nonpositive_lower(self) -> None:
        """Test that a lower bound of zero or below raises."""
        with pytest.raises(NonpositiveLower):
            table_gap(1.0, 0.0)
        with pytest.raises(NonpositiveLower):
            table_gap(1.0, -0.5)

    def test_nan_lower(self) -> None:
        """Test that NaN is not a positive lower bound."""
        with pytest.raises(NonpositiveLower):
            table_gap(1.0, float("nan"))


class TestParseMeshSize:
    """Tests for parse_mesh_size function."""

    def test_cell_count(self) -> None:
        """Test plain cell counts."""
        assert parse_mesh_size("32") == 32
        assert parse_mesh_size(" 2048 ") == 2048

    def test_power_of_two(self) -> None:
        """Test h = 2^-k."""
        assert parse_mesh_size("2^-5") == 32
        assert parse_mesh_size("2^-11") == 2048

    def test_fraction(self) -> None:
        """Test h = 1/n."""
        assert parse_mesh_size("1/24") == 24
        assert parse_mesh_size("1 / 8") == 8

    def test_invalid_format(self) -> None:
        """Test invalid formats raise ValueError."""
        with pytest.raises(ValueError):
            parse_mesh_size("h=1/32")
        with pytest.raises(ValueError):
            parse_mesh_size("0.03125")
        with pytest.raises(ValueError):
            parse_mesh_size("0")


class TestFormatting:
    """Tests for the formatting helpers."""

    def test_mesh_size(self) -> None:
        """Test powers of two and other sizes."""
        assert format_mesh_size(8) == "2^-3"
        assert format_mesh_size(1) == "2^-0"
        assert format_mesh_size(24) == "1/24"

    def test_sci(self) -> None:
        """Test scientific notation and the NaN placeholder."""
        assert format_sci(8.3679e-2) == "8.3679e-02"
        assert format_sci(1234.5, digits=2) == "1.23e+03"
        assert format_sci(float("nan")) == "-"

    def test_seconds(self) -> None:
        """Test the three wall-time ranges."""
        assert format_seconds(12.34) == "12.3s"
        assert format_seconds(90.0) == "1.5min"
        assert format_seconds(5400.0) == "1.50h"
