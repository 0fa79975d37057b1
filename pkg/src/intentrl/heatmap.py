"""Value heatmap rendering: SVG primary (diff-able text), optional PGM."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .envs import MazeLayout
from .errors import ShapeError

CELL_PX = 24
WALL_COLOR = "#2b2b2b"

# Three-stop linear colormap: dark blue -> teal -> yellow.
_STOPS = ((13, 8, 135), (33, 145, 140), (253, 231, 37))


def _color(t: float) -> str:
    t = min(max(t, 0.0), 1.0)
    if t < 0.5:
        a, b, u = _STOPS[0], _STOPS[1], t * 2.0
    else:
        a, b, u = _STOPS[1], _STOPS[2], (t - 0.5) * 2.0
    rgb = tuple(int(round(x + (y - x) * u)) for x, y in zip(a, b))
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def emit_heatmap(values: np.ndarray, layout: MazeLayout, path, title: str = "") -> Path:
    """Write an SVG grid of values; NaN cells are masked as walls.

    The goal cells carry a marker and the legend states the linear color
    scale's min/max.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (layout.width, layout.height):
        raise ShapeError(
            f"values shape {values.shape} != layout ({layout.width}, {layout.height})")
    finite = values[np.isfinite(values)]
    vmin = float(finite.min()) if finite.size else 0.0
    vmax = float(finite.max()) if finite.size else 0.0
    span = vmax - vmin
    w_px = layout.width * CELL_PX
    h_px = layout.height * CELL_PX + 28
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w_px}" height="{h_px}" '
        f'viewBox="0 0 {w_px} {h_px}">',
    ]
    for x in range(layout.width):
        for y in range(layout.height):
            v = values[x, y]
            fill = WALL_COLOR if not np.isfinite(v) else (
                _color(0.5 if span == 0 else (v - vmin) / span))
            px = x * CELL_PX
            py = (layout.height - 1 - y) * CELL_PX
            parts.append(
                f'<rect x="{px}" y="{py}" width="{CELL_PX}" height="{CELL_PX}" '
                f'fill="{fill}" stroke="#ffffff" stroke-width="1"/>')
    for gx, gy in sorted(layout.goal):
        cx = gx * CELL_PX + CELL_PX // 2
        cy = (layout.height - 1 - gy) * CELL_PX + CELL_PX // 2
        parts.append(
            f'<circle cx="{cx}" cy="{cy}" r="{CELL_PX // 3}" fill="none" '
            f'stroke="#e8453c" stroke-width="3"/>')
    legend = f"min={vmin:.4f} max={vmax:.4f}"
    if title:
        legend = f"{title}  {legend}"
    parts.append(
        f'<text x="4" y="{layout.height * CELL_PX + 18}" font-family="monospace" '
        f'font-size="12" fill="#000000">{legend}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path


def emit_heatmap_pgm(values: np.ndarray, layout: MazeLayout, path) -> Path:
    """ASCII PGM rendition; walls are 0, values span 1..255 linearly."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (layout.width, layout.height):
        raise ShapeError(
            f"values shape {values.shape} != layout ({layout.width}, {layout.height})")
    finite = values[np.isfinite(values)]
    vmin = float(finite.min()) if finite.size else 0.0
    vmax = float(finite.max()) if finite.size else 0.0
    span = vmax - vmin
    rows = [f"P2", f"{layout.width} {layout.height}", "255"]
    for y in reversed(range(layout.height)):
        row = []
        for x in range(layout.width):
            v = values[x, y]
            if not np.isfinite(v):
                row.append("0")
            else:
                t = 0.5 if span == 0 else (v - vmin) / span
                row.append(str(1 + int(round(t * 254))))
        rows.append(" ".join(row))
    path = Path(path)
    path.write_text("\n".join(rows) + "\n")
    return path
