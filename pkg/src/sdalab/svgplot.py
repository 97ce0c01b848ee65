"""Standalone SVG rendering of decision grids with scatter overlays.

Documents are self-contained (no external assets), fixed 800x800 viewBox.
Class palette, in order of class index: blue, orange, green, red, purple,
brown, pink, gray; heatmap cells use a lightened variant of the same hue.
"""

import numpy as np

from .metrics import DecisionGrid

PALETTE = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
]
LIGHT_PALETTE = [
    "#aec7e8", "#ffbb78", "#98df8a", "#ff9896",
    "#c5b0d5", "#c49c94", "#f7b6d2", "#c7c7c7",
]
SIZE = 800


def _color(idx: int, light: bool) -> str:
    pal = LIGHT_PALETTE if light else PALETTE
    return pal[idx % len(pal)]


def _to_px(x, y, bounds):
    xmin, xmax, ymin, ymax = bounds
    px = (x - xmin) / (xmax - xmin) * SIZE
    py = SIZE - (y - ymin) / (ymax - ymin) * SIZE  # svg y grows downward
    return px, py


def render_panel(
    grid: DecisionGrid,
    scatter_points=None,
    scatter_labels=None,
    highlight_points=None,
    highlight_labels=None,
    title: str = "",
) -> str:
    """One 800x800 document: heatmap cells, scatter dots, highlighted circles.

    highlight_* marks feedback/labeled points: larger circles with a black rim.
    """
    res = grid.resolution
    cell = SIZE / res
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SIZE} {SIZE}" '
        f'width="{SIZE}" height="{SIZE}">',
        f'<rect width="{SIZE}" height="{SIZE}" fill="white"/>',
    ]
    for r in range(res):
        for c in range(grid.resolution):
            # cells[r, c]: r is the y index from ymin; svg draws from the top
            color = _color(int(grid.cells[r, c]), light=True)
            x = c * cell
            y = SIZE - (r + 1) * cell
            parts.append(
                f'<rect x="{x:.2f}" y="{y:.2f}" width="{cell:.2f}" '
                f'height="{cell:.2f}" fill="{color}"/>'
            )
    if scatter_points is not None:
        labels = np.asarray(scatter_labels)
        for (x, y), lab in zip(np.asarray(scatter_points), labels):
            px, py = _to_px(x, y, grid.bounds)
            parts.append(
                f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" '
                f'fill="{_color(int(lab), light=False)}" fill-opacity="0.8"/>'
            )
    if highlight_points is not None:
        labels = np.asarray(highlight_labels)
        for (x, y), lab in zip(np.asarray(highlight_points), labels):
            px, py = _to_px(x, y, grid.bounds)
            parts.append(
                f'<circle cx="{px:.2f}" cy="{py:.2f}" r="7" '
                f'fill="{_color(int(lab), light=False)}" stroke="black" stroke-width="2"/>'
            )
    if title:
        parts.append(
            f'<text x="16" y="30" font-family="monospace" font-size="22" '
            f'fill="black">{title}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts)


def write_panel(path, *args, **kwargs) -> None:
    with open(path, "w") as fh:
        fh.write(render_panel(*args, **kwargs))
