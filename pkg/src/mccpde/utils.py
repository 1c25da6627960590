"""
Utility functions for mccpde.
"""

import math
import re

from mccpde.errors import NonpositiveLower


def table_gap(upper: float, lower: float) -> float:
    """
    Relative gap between an upper and a lower bound.

    Args:
        upper: Upper bound
        lower: Lower bound, must be positive

    Returns:
        (upper - lower) / lower

    Raises:
        NonpositiveLower: If lower is not positive
    """
    if not lower > 0.0:
        raise NonpositiveLower(f"Relative gap needs a positive lower bound, got {lower}")
    return (upper - lower) / lower


def parse_mesh_size(text: str) -> int:
    """
    Parse a mesh size into a number of cells.

    Args:
        text: Cell count ("32"), power of two ("2^-5") or fraction ("1/32")

    Returns:
        Number of cells of the uniform partition

    Raises:
        ValueError: If the format is invalid
    """
    text = text.strip().replace(" ", "")
    match = re.match(r"^(?:2\^-(\d+)|1/(\d+)|(\d+))$", text)
    if not match:
        raise ValueError(f"Invalid mesh size: {text}. Use: 32, 2^-5, 1/32")
    power, denominator, cells = match.groups()
    if power is not None:
        n = 2 ** int(power)
    else:
        n = int(denominator or cells)
    if n <= 0:
        raise ValueError(f"Mesh size must describe at least one cell: {text}")
    return n


def format_mesh_size(n_cells: int) -> str:
    """
    Format a mesh size for table headers.

    Args:
        n_cells: Number of cells

    Returns:
        "2^-k" for powers of two, "1/n" otherwise
    """
    k = int(math.log2(n_cells)) if n_cells > 0 else 0
    if n_cells > 0 and 2**k == n_cells:
        return f"2^-{k}"
    return f"1/{n_cells}"


def format_sci(value: float, digits: int = 4) -> str:
    """
    Format a number in scientific notation.

    Args:
        value: Number to format
        digits: Digits after the decimal point

    Returns:
        Formatted string, or "-" for NaN
    """
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return f"{value:.{digits}e}"


def format_seconds(seconds: float) -> str:
    """Format a wall time as seconds, minutes or hours."""
    if seconds < 60:
        return f"{seconds:.1f}s"
    if seconds < 3600:
        return f"{seconds / 60:.1f}min"
    return f"{seconds / 3600:.2f}h"
