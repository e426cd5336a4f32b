"""Minimal standalone SVG charts: scatter, line and bar plots.

Output is plain text with fixed float formatting, so identical inputs give
byte-identical files.
"""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
WIDTH, HEIGHT, MARGIN = 480, 360, 48


class _Frame:
    """Maps data coordinates into the plotting rectangle."""

    def __init__(self, xs, ys):
        self.x0, self.x1 = _span(xs)
        self.y0, self.y1 = _span(ys)

    def px(self, x):
        return MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2 * MARGIN)

    def py(self, y):
        return HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2 * MARGIN)


def _span(values):
    values = np.asarray(values, dtype=np.float64)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return 0.0, 1.0
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _header(title, frame, xlabel="", ylabel=""):
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="20" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{escape(title)}</text>',
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" '
        f'height="{HEIGHT - 2 * MARGIN}" fill="none" stroke="#444"/>',
    ]
    for lab, v in ((f"{frame.x0:.3g}", MARGIN), (f"{frame.x1:.3g}", WIDTH - MARGIN)):
        parts.append(f'<text x="{v}" y="{HEIGHT - MARGIN + 14}" font-size="10" '
                     f'text-anchor="middle" font-family="sans-serif">{lab}</text>')
    for lab, v in ((f"{frame.y0:.3g}", HEIGHT - MARGIN), (f"{frame.y1:.3g}", MARGIN)):
        parts.append(f'<text x="{MARGIN - 4}" y="{v + 3}" font-size="10" '
                     f'text-anchor="end" font-family="sans-serif">{lab}</text>')
    if xlabel:
        parts.append(f'<text x="{WIDTH / 2:.1f}" y="{HEIGHT - 10}" font-size="11" '
                     f'text-anchor="middle" font-family="sans-serif">{escape(xlabel)}</text>')
    if ylabel:
        parts.append(f'<text x="12" y="{HEIGHT / 2:.1f}" font-size="11" text-anchor="middle" '
                     f'font-family="sans-serif" transform="rotate(-90 12 {HEIGHT / 2:.1f})">'
                     f'{escape(ylabel)}</text>')
    return parts


def _legend(labels):
    parts = []
    for i, label in enumerate(labels):
        y = MARGIN + 12 + 14 * i
        color = PALETTE[i % len(PALETTE)]
        parts.append(f'<rect x="{WIDTH - MARGIN - 110}" y="{y - 8}" width="8" height="8" '
                     f'fill="{color}"/>')
        parts.append(f'<text x="{WIDTH - MARGIN - 98}" y="{y}" font-size="10" '
                     f'font-family="sans-serif">{escape(label)}</text>')
    return parts


def _write(path, parts):
    path = Path(path)
    path.write_text("\n".join(parts + ["</svg>"]) + "\n")
    return path


def scatter(path, groups, title="", max_points=2000):
    """``groups`` maps a label to an ``(n, 2)`` array; at most ``max_points`` per group."""
    groups = {k: np.asarray(v, dtype=np.float64)[:max_points] for k, v in groups.items()}
    allpts = np.concatenate(list(groups.values())) if groups else np.zeros((0, 2))
    frame = _Frame(allpts[:, 0], allpts[:, 1])
    parts = _header(title, frame)
    for i, pts in enumerate(groups.values()):
        color = PALETTE[i % len(PALETTE)]
        parts.append(f'<g fill="{color}" fill-opacity="0.5">')
        parts.extend(f'<circle cx="{frame.px(x):.2f}" cy="{frame.py(y):.2f}" r="1.2"/>'
                     for x, y in pts if np.isfinite(x) and np.isfinite(y))
        parts.append("</g>")
    return _write(path, parts + _legend(list(groups)))


def line_chart(path, x, series, title="", xlabel="", ylabel=""):
    """``series`` maps a label to y-values aligned with ``x``."""
    x = np.asarray(x, dtype=np.float64)
    ys = [np.asarray(v, dtype=np.float64) for v in series.values()]
    frame = _Frame(x, np.concatenate(ys) if ys else [0.0])
    parts = _header(title, frame, xlabel, ylabel)
    for i, y in enumerate(ys):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{frame.px(a):.2f},{frame.py(b):.2f}" for a, b in zip(x, y))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.extend(f'<circle cx="{frame.px(a):.2f}" cy="{frame.py(b):.2f}" r="2.5" '
                     f'fill="{color}"/>' for a, b in zip(x, y))
    return _write(path, parts + _legend(list(series)))


def bar_chart(path, values, title="", xlabel="", ylabel=""):
    """One bar per entry of ``values`` (e.g. per-step curvature)."""
    values = np.asarray(values, dtype=np.float64)
    frame = _Frame([0, len(values)], np.append(values, 0.0))
    parts = _header(title, frame, xlabel, ylabel)
    w = (WIDTH - 2 * MARGIN) / max(len(values), 1)
    base = frame.py(0.0)
    for i, v in enumerate(values):
        top = frame.py(v)
        parts.append(f'<rect x="{frame.px(i):.2f}" y="{min(top, base):.2f}" '
                     f'width="{max(w - 0.5, 0.5):.2f}" height="{abs(base - top):.2f}" '
                     f'fill="{PALETTE[0]}"/>')
    return _write(path, parts)
