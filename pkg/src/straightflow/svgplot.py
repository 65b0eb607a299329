"""Hand-emitted SVG scatter/trajectory plots.

No plotting dependency: the output text is a pure function of the inputs
(fixed canvas, fixed decimal formatting, insertion-ordered layers), so a
fixture rendered twice is byte-identical and golden tests can hash it.
"""
from __future__ import annotations

import numpy as np

from .errors import UsageError

WIDTH = 640.0
HEIGHT = 480.0
MARGIN = 54.0
PALETTE = ("#306bac", "#c8403a", "#3c8a4e", "#8a61b8", "#777777")


def _as_xy(points: np.ndarray) -> np.ndarray:
    """(n, d) -> (n, 2): first two coordinates, zero-padded for d == 1."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 1:
        raise UsageError(f"expected (n, d) points, got shape {pts.shape}")
    if pts.shape[1] == 1:
        return np.concatenate([pts, np.zeros_like(pts)], axis=1)
    return pts[:, :2]


class SvgFigure:
    """Scatter layers and trajectory polylines on a shared data frame."""

    def __init__(self, title: str = ""):
        self.title = title
        self._scatters = []  # (xy, color, label)
        self._lines = []  # (list of (k+1, 2) paths, color, label)

    def _color(self, explicit):
        if explicit is not None:
            return explicit
        used = len(self._scatters) + len(self._lines)
        return PALETTE[used % len(PALETTE)]

    def add_scatter(self, points, label: str = "", color: str | None = None):
        self._scatters.append((_as_xy(points), self._color(color), label))

    def add_trajectories(self, states, label: str = "", color: str | None = None):
        """states (K+1, N, d): one polyline per sample column."""
        arr = np.asarray(states, dtype=np.float64)
        if arr.ndim != 3:
            raise UsageError(f"expected (K+1, N, d) states, got shape {arr.shape}")
        paths = [_as_xy(arr[:, i, :]) for i in range(arr.shape[1])]
        self._lines.append((paths, self._color(color), label))

    # rendering ---------------------------------------------------------------

    def _limits(self):
        chunks = [xy for xy, _, _ in self._scatters]
        for paths, _, _ in self._lines:
            chunks.extend(paths)
        chunks = [c for c in chunks if c.size]
        if not chunks:
            return -1.0, 1.0, -1.0, 1.0
        allpts = np.concatenate(chunks, axis=0)
        xmin, ymin = allpts.min(axis=0)
        xmax, ymax = allpts.max(axis=0)
        padx = 0.05 * ((xmax - xmin) or 1.0)
        pady = 0.05 * ((ymax - ymin) or 1.0)
        return xmin - padx, xmax + padx, ymin - pady, ymax + pady

    def render(self) -> str:
        xmin, xmax, ymin, ymax = self._limits()
        sx = (WIDTH - 2 * MARGIN) / (xmax - xmin)
        sy = (HEIGHT - 2 * MARGIN) / (ymax - ymin)

        def px(x):
            return f"{MARGIN + (x - xmin) * sx:.2f}"

        def py(y):
            return f"{HEIGHT - MARGIN - (y - ymin) * sy:.2f}"

        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0f}" '
            f'height="{HEIGHT:.0f}" viewBox="0 0 {WIDTH:.0f} {HEIGHT:.0f}">',
            f'<rect x="0" y="0" width="{WIDTH:.0f}" height="{HEIGHT:.0f}" fill="#ffffff"/>',
            f'<rect x="{MARGIN:.0f}" y="{MARGIN:.0f}" width="{WIDTH - 2 * MARGIN:.0f}" '
            f'height="{HEIGHT - 2 * MARGIN:.0f}" fill="none" stroke="#222222"/>',
        ]
        ticks = [
            (MARGIN, HEIGHT - MARGIN + 16, xmin, "middle"),
            (WIDTH - MARGIN, HEIGHT - MARGIN + 16, xmax, "middle"),
            (MARGIN - 6, HEIGHT - MARGIN, ymin, "end"),
            (MARGIN - 6, MARGIN + 4, ymax, "end"),
        ]
        for tx, ty, val, anchor in ticks:
            out.append(
                f'<text x="{tx:.0f}" y="{ty:.0f}" font-size="11" font-family="monospace" '
                f'text-anchor="{anchor}" fill="#222222">{val:.4g}</text>'
            )
        if self.title:
            out.append(
                f'<text x="{WIDTH / 2:.0f}" y="{MARGIN - 14:.0f}" font-size="14" '
                f'font-family="monospace" text-anchor="middle" fill="#222222">{self.title}</text>'
            )
        for paths, color, _ in self._lines:
            for path in paths:
                pts = " ".join(f"{px(x)},{py(y)}" for x, y in path)
                out.append(
                    f'<polyline fill="none" stroke="{color}" stroke-width="1" '
                    f'opacity="0.65" points="{pts}"/>'
                )
        for xy, color, _ in self._scatters:
            for x, y in xy:
                out.append(f'<circle cx="{px(x)}" cy="{py(y)}" r="2.5" fill="{color}"/>')
        legend_y = MARGIN + 14
        for _, color, label in self._lines + self._scatters:
            if not label:
                continue
            out.append(
                f'<text x="{WIDTH - MARGIN - 6:.0f}" y="{legend_y:.0f}" font-size="11" '
                f'font-family="monospace" text-anchor="end" fill="{color}">{label}</text>'
            )
            legend_y += 14
        out.append("</svg>")
        return "\n".join(out) + "\n"


def bundle_figure(bundle, source_points=None, target_points=None, title: str = "") -> SvgFigure:
    """Standard trajectory view: polylines plus start/end scatters."""
    fig = SvgFigure(title)
    fig.add_trajectories(bundle.states, label="trajectories", color=PALETTE[0])
    fig.add_scatter(bundle.states[0], label="start", color=PALETTE[4])
    fig.add_scatter(bundle.endpoints, label="end", color=PALETTE[1])
    if source_points is not None:
        fig.add_scatter(source_points, label="source", color=PALETTE[2])
    if target_points is not None:
        fig.add_scatter(target_points, label="target", color=PALETTE[3])
    return fig


def points_figure(points, title: str = "") -> SvgFigure:
    fig = SvgFigure(title)
    if np.asarray(points).size:
        fig.add_scatter(points, label="samples", color=PALETTE[0])
    return fig
