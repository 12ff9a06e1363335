"""Minimal self-contained SVG charts (polylines, boxes, dots)."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

__all__ = ["line_chart", "box_plot", "scatter_plot"]

WIDTH, HEIGHT = 640, 400
MARGIN = 60
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b",
           "#e377c2"]


def _finite(values):
    return [float(v) for v in values if v is not None and math.isfinite(float(v))]


def _range(values):
    vals = _finite(values)
    if not vals:
        return 0.0, 1.0
    lo, hi = min(vals), max(vals)
    if hi == lo:
        pad = abs(lo) * 0.1 or 1.0
        return lo - pad, hi + pad
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


class _Canvas:
    def __init__(self, title, xlabel, ylabel, xrange, yrange):
        self.xlo, self.xhi = xrange
        self.ylo, self.yhi = yrange
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">'
            f'{escape(title)}</text>',
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="15" y="{HEIGHT / 2}" text-anchor="middle" '
            f'transform="rotate(-90 15 {HEIGHT / 2})">{escape(ylabel)}</text>',
        ]
        x0, y0, x1, y1 = MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN / 2, MARGIN / 2
        self.parts.append(f'<polyline points="{x0},{y1} {x0},{y0} {x1},{y0}" fill="none" '
                          f'stroke="black"/>')
        for t in np.linspace(self.ylo, self.yhi, 5):
            y = self.y(t)
            self.parts.append(f'<text x="{x0 - 5}" y="{y + 4:.1f}" text-anchor="end">{t:.3g}</text>')

    def x(self, v):
        return MARGIN + (v - self.xlo) / (self.xhi - self.xlo) * (WIDTH - 1.5 * MARGIN)

    def y(self, v):
        return HEIGHT - MARGIN - (v - self.ylo) / (self.yhi - self.ylo) * (HEIGHT - 1.5 * MARGIN)

    def xtick(self, v, label):
        self.parts.append(f'<text x="{self.x(v):.1f}" y="{HEIGHT - MARGIN + 16}" '
                          f'text-anchor="middle">{escape(str(label))}</text>')

    def legend(self, names):
        for i, name in enumerate(names):
            y = MARGIN / 2 + 14 * i + 6
            color = PALETTE[i % len(PALETTE)]
            self.parts.append(f'<rect x="{WIDTH - 170}" y="{y - 8}" width="10" height="10" '
                              f'fill="{color}"/>')
            self.parts.append(f'<text x="{WIDTH - 155}" y="{y + 1}">{escape(name)}</text>')

    def render(self):
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def line_chart(series: dict, title="", xlabel="k", ylabel="c-Eval") -> str:
    """One polyline per ``name -> [(x, y), ...]``; non-finite points break nothing, they are skipped."""
    xs = [p[0] for pts in series.values() for p in pts]
    ys = [p[1] for pts in series.values() for p in pts]
    canvas = _Canvas(title, xlabel, ylabel, _range(xs), _range(ys))
    for v in sorted(set(_finite(xs))):
        canvas.xtick(v, f"{v:g}")
    for i, (name, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        good = [(x, y) for x, y in pts if y is not None and math.isfinite(y)]
        coords = " ".join(f"{canvas.x(x):.2f},{canvas.y(y):.2f}" for x, y in good)
        if len(good) > 1:
            canvas.parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                                f'stroke-width="2"/>')
        for x, y in good:
            canvas.parts.append(f'<circle cx="{canvas.x(x):.2f}" cy="{canvas.y(y):.2f}" r="3" '
                                f'fill="{color}"/>')
    canvas.legend(list(series))
    return canvas.render()


def box_plot(groups: dict, title="", ylabel="normalized c-Eval") -> str:
    """Quartile box, median line and min/max whiskers per group."""
    allv = [v for vals in groups.values() for v in vals]
    canvas = _Canvas(title, "", ylabel, (-0.5, max(len(groups), 1) - 0.5), _range(allv))
    for i, (name, vals) in enumerate(groups.items()):
        canvas.xtick(i, name)
        vals = _finite(vals)
        if not vals:
            continue
        lo, q1, med, q3, hi = np.percentile(vals, [0, 25, 50, 75, 100])
        color = PALETTE[i % len(PALETTE)]
        cx = canvas.x(i)
        half = 0.3 * (canvas.x(1) - canvas.x(0))
        canvas.parts.append(f'<line x1="{cx:.2f}" y1="{canvas.y(lo):.2f}" x2="{cx:.2f}" '
                            f'y2="{canvas.y(hi):.2f}" stroke="black"/>')
        canvas.parts.append(f'<rect x="{cx - half:.2f}" y="{canvas.y(q3):.2f}" '
                            f'width="{2 * half:.2f}" height="{canvas.y(q1) - canvas.y(q3):.2f}" '
                            f'fill="{color}" fill-opacity="0.5" stroke="black"/>')
        canvas.parts.append(f'<line x1="{cx - half:.2f}" y1="{canvas.y(med):.2f}" '
                            f'x2="{cx + half:.2f}" y2="{canvas.y(med):.2f}" stroke="black" '
                            f'stroke-width="2"/>')
        mean = float(np.mean(vals))
        canvas.parts.append(f'<circle cx="{cx:.2f}" cy="{canvas.y(mean):.2f}" r="3" fill="black"/>')
    return canvas.render()


def scatter_plot(xs, ys, title="", xlabel="", ylabel="") -> str:
    pts = [(float(x), float(y)) for x, y in zip(xs, ys)
           if math.isfinite(float(x)) and math.isfinite(float(y))]
    canvas = _Canvas(title, xlabel, ylabel, _range([p[0] for p in pts]),
                     _range([p[1] for p in pts]))
    for t in np.linspace(canvas.xlo, canvas.xhi, 5):
        canvas.xtick(t, f"{t:.3g}")
    for x, y in pts:
        canvas.parts.append(f'<circle cx="{canvas.x(x):.2f}" cy="{canvas.y(y):.2f}" r="2.5" '
                            f'fill="{PALETTE[0]}" fill-opacity="0.7"/>')
    return canvas.render()
