"""
Output writers: fixed-header CSV tables, JSON reports and standalone SVG charts.

CSV rows use ``repr`` of floats so identical runs produce identical files.
"""

import csv
import json
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from mccpde.grid import CellFunction, NodalFunction

PathLike = Union[str, Path]

WIDTH, HEIGHT = 720, 420
MARGIN = 56
PALETTE = ["#1f4e9c", "#c0392b", "#27864a", "#8e44ad", "#d68910", "#5d6d7e"]


def _cell(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if value is None:
        return ""
    return value


def write_csv(path: PathLike, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    """Write a table with a fixed header row."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def write_json(path: PathLike, payload: Union[BaseModel, dict[str, Any]]) -> Path:
    """Write a pydantic model or a plain dict as indented JSON."""
    path = Path(path)
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2)
    else:
        text = json.dumps(payload, indent=2, sort_keys=True, default=float)
    path.write_text(text + "\n")
    return path


class Series(BaseModel):
    """A polyline."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    label: str
    x: np.ndarray
    y: np.ndarray
    color: Optional[str] = None
    dashed: bool = False


class Band(BaseModel):
    """A filled region between two curves."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    label: str
    x: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    color: str = "#9db7e0"
    opacity: float = 0.45


def step_curve(cf: CellFunction) -> tuple[np.ndarray, np.ndarray]:
    """Breakpoints of a piecewise-constant function for plotting."""
    edges = cf.partition.cell_edges
    x = np.repeat(edges, 2)[1:-1]
    y = np.repeat(cf.values, 2)
    return x, y


def nodal_curve(u: NodalFunction) -> tuple[np.ndarray, np.ndarray]:
    return u.partition.cell_edges, u.values


def step_band(label: str, lo: CellFunction, hi: CellFunction, **kwargs: Any) -> Band:
    x, y_lo = step_curve(lo)
    _, y_hi = step_curve(hi)
    return Band(label=label, x=x, lo=y_lo, hi=y_hi, **kwargs)


def line_chart_svg(
    title: str,
    series: Sequence[Series],
    bands: Sequence[Band] = (),
    x_label: str = "x",
    y_label: str = "",
) -> str:
    """Render a standalone SVG line chart with optional filled bands and a legend."""
    ys = [s.y for s in series] + [b.lo for b in bands] + [b.hi for b in bands]
    xs = [s.x for s in series] + [b.x for b in bands]
    y_min = min(float(np.min(y)) for y in ys) if ys else 0.0
    y_max = max(float(np.max(y)) for y in ys) if ys else 1.0
    x_min = min(float(np.min(x)) for x in xs) if xs else 0.0
    x_max = max(float(np.max(x)) for x in xs) if xs else 1.0
    if y_max - y_min < 1e-12:
        y_min, y_max = y_min - 0.5, y_max + 0.5
    pad = 0.05 * (y_max - y_min)
    y_min, y_max = y_min - pad, y_max + pad
    if x_max - x_min < 1e-12:
        x_max = x_min + 1.0

    def px(x: np.ndarray) -> np.ndarray:
        return MARGIN + (np.asarray(x) - x_min) / (x_max - x_min) * (WIDTH - 2 * MARGIN)

    def py(y: np.ndarray) -> np.ndarray:
        return HEIGHT - MARGIN - (np.asarray(y) - y_min) / (y_max - y_min) * (HEIGHT - 2 * MARGIN)

    def points(x: np.ndarray, y: np.ndarray) -> str:
        return " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px(x), py(y)))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="22" text-anchor="middle" font-size="15">'
        f"{_escape(title)}</text>",
    ]
    x0, y0 = MARGIN, HEIGHT - MARGIN
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{WIDTH - MARGIN}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{MARGIN}" x2="{x0}" y2="{y0}" stroke="black"/>')
    for t in np.linspace(x_min, x_max, 6):
        out.append(
            f'<text x="{float(px(t)):.2f}" y="{y0 + 18}" text-anchor="middle">{t:.2g}</text>'
        )
    for t in np.linspace(y_min, y_max, 6):
        out.append(
            f'<text x="{x0 - 6}" y="{float(py(t)) + 4:.2f}" text-anchor="end">{t:.3g}</text>'
        )
    out.append(
        f'<text x="{WIDTH / 2:.0f}" y="{HEIGHT - 12}" text-anchor="middle">'
        f"{_escape(x_label)}</text>"
    )
    if y_label:
        out.append(
            f'<text x="16" y="{HEIGHT / 2:.0f}" transform="rotate(-90 16 {HEIGHT / 2:.0f})" '
            f'text-anchor="middle">{_escape(y_label)}</text>'
        )

    legend: list[tuple[str, str, bool, bool]] = []
    for band in bands:
        outline = np.concatenate([band.x, band.x[::-1]]), np.concatenate([band.hi, band.lo[::-1]])
        out.append(
            f'<polygon points="{points(*outline)}" fill="{band.color}" '
            f'fill-opacity="{band.opacity}" stroke="none"/>'
        )
        legend.append((band.label, band.color, False, True))
    for k, s in enumerate(series):
        color = s.color or PALETTE[k % len(PALETTE)]
        dash = ' stroke-dasharray="6,4"' if s.dashed else ""
        out.append(
            f'<polyline points="{points(s.x, s.y)}" fill="none" stroke="{color}" '
            f'stroke-width="1.6"{dash}/>'
        )
        legend.append((s.label, color, s.dashed, False))

    for k, (label, color, dashed, filled) in enumerate(legend):
        ly = MARGIN + 4 + 16 * k
        lx = WIDTH - MARGIN - 170
        if filled:
            out.append(
                f'<rect x="{lx}" y="{ly - 8}" width="22" height="10" fill="{color}" '
                f'fill-opacity="0.45"/>'
            )
        else:
            dash = ' stroke-dasharray="6,4"' if dashed else ""
            out.append(
                f'<line x1="{lx}" y1="{ly - 3}" x2="{lx + 22}" y2="{ly - 3}" stroke="{color}" '
                f'stroke-width="1.6"{dash}/>'
            )
        out.append(f'<text x="{lx + 28}" y="{ly}">{_escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_svg(path: PathLike, svg: str) -> Path:
    path = Path(path)
    path.write_text(svg)
    return path
