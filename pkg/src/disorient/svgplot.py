"""Minimal dependency-free SVG line charts (fixed 800x600 viewport)."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 800, 600
MARGIN = dict(left=80, right=170, top=50, bottom=70)
PALETTE = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    ticks = []
    v = start
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 10))
        v += step
    return ticks


def line_chart(series: dict, title: str, xlabel: str, ylabel: str,
               hlines: dict | None = None, equal_aspect: bool = False) -> str:
    """``series``: name -> list of (x, y); ``hlines``: name -> y (dashed)."""
    hlines = hlines or {}
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts] + list(hlines.values())
    if not xs:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
    if equal_aspect:
        span = max((x1 - x0) / pw, (y1 - y0) / ph)
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        x0, x1 = cx - span * pw / 2, cx + span * pw / 2
        y0, y1 = cy - span * ph / 2, cy + span * ph / 2
    else:
        pad = 0.05 * (y1 - y0)
        y0, y1 = y0 - pad, y1 + pad

    def sx(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return MARGIN["top"] + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2}" y="28" text-anchor="middle" font-size="18" '
           f'font-family="sans-serif">{escape(title)}</text>',
           f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
           f'fill="none" stroke="black"/>']
    for t in _nice_ticks(x0, x1):
        if x0 <= t <= x1:
            out.append(f'<line x1="{_fmt(sx(t))}" y1="{MARGIN["top"] + ph}" x2="{_fmt(sx(t))}" '
                       f'y2="{MARGIN["top"] + ph + 5}" stroke="black"/>')
            out.append(f'<text x="{_fmt(sx(t))}" y="{MARGIN["top"] + ph + 20}" text-anchor="middle" '
                       f'font-size="12" font-family="sans-serif">{t:g}</text>')
    for t in _nice_ticks(y0, y1):
        if y0 <= t <= y1:
            out.append(f'<line x1="{MARGIN["left"] - 5}" y1="{_fmt(sy(t))}" x2="{MARGIN["left"]}" '
                       f'y2="{_fmt(sy(t))}" stroke="black"/>')
            out.append(f'<text x="{MARGIN["left"] - 8}" y="{_fmt(sy(t) + 4)}" text-anchor="end" '
                       f'font-size="12" font-family="sans-serif">{t:g}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2}" y="{HEIGHT - 20}" text-anchor="middle" '
               f'font-size="14" font-family="sans-serif">{escape(xlabel)}</text>')
    out.append(f'<text x="20" y="{MARGIN["top"] + ph / 2}" text-anchor="middle" font-size="14" '
               f'font-family="sans-serif" transform="rotate(-90 20 {MARGIN["top"] + ph / 2})">'
               f'{escape(ylabel)}</text>')
    legend_y = MARGIN["top"] + 10
    for n, (name, y) in enumerate(hlines.items()):
        color = "#555555"
        out.append(f'<line x1="{MARGIN["left"]}" y1="{_fmt(sy(y))}" x2="{MARGIN["left"] + pw}" '
                   f'y2="{_fmt(sy(y))}" stroke="{color}" stroke-dasharray="6,4"/>')
        out.append(_legend(legend_y, name, color, dashed=True, x=MARGIN["left"] + pw + 15))
        legend_y += 22
    for n, (name, pts) in enumerate(series.items()):
        color = PALETTE[n % len(PALETTE)]
        pts = sorted(pts) if not equal_aspect else pts
        coords = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in pts)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in pts if len(pts) <= 40 else []:
            out.append(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="3" fill="{color}"/>')
        out.append(_legend(legend_y, name, color, x=MARGIN["left"] + pw + 15))
        legend_y += 22
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _legend(y: float, name: str, color: str, dashed: bool = False, x: float = 0) -> str:
    dash = ' stroke-dasharray="6,4"' if dashed else ""
    return (f'<line x1="{x}" y1="{y}" x2="{x + 25}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/>'
            f'<text x="{x + 32}" y="{y + 4}" font-size="12" font-family="sans-serif">'
            f'{escape(name)}</text>')


def write_svg(path, text: str) -> None:
    with open(path, "w") as f:
        f.write(text)
