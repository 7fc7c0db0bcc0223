"""Minimal static SVG line charts with optional error bars."""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")
W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 150, 40, 50


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.floor(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 10))
        t += step
    return ticks


def line_chart(path, series, title="", xlabel="", ylabel=""):
    """Write an SVG chart.

    Args:
        path: output file.
        series: list of dicts with ``label``, ``x``, ``y`` and optional ``err``
            (half-width of the error bar at each point).
        title, xlabel, ylabel: text labels.
    """
    xs = [x for s in series for x in s["x"]]
    lows = [y - (e or 0.0) for s in series for y, e in zip(s["y"], s.get("err") or [0.0] * len(s["y"]))]
    highs = [y + (e or 0.0) for s in series for y, e in zip(s["y"], s.get("err") or [0.0] * len(s["y"]))]
    finite = [v for v in lows + highs if math.isfinite(v)]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(finite), max(finite)) if finite else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    pad = 0.05 * (y1 - y0) if y1 > y0 else 1.0
    y0, y1 = y0 - pad, y1 + pad
    yt = _ticks(y0, y1)
    y0, y1 = min(y0, yt[0]), max(y1, yt[-1])
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def px(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def py(y):
        return TOP + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-size="15" font-family="sans-serif">'
           f'{escape(title)}</text>',
           f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
           f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>']
    for t in yt:
        out.append(f'<line x1="{LEFT - 4}" y1="{py(t):.1f}" x2="{LEFT}" y2="{py(t):.1f}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 7}" y="{py(t) + 4:.1f}" text-anchor="end" font-size="11" '
                   f'font-family="sans-serif">{t:g}</text>')
    for t in _ticks(x0, x1):
        if x0 - 1e-9 <= t <= x1 + 1e-9:
            out.append(f'<line x1="{px(t):.1f}" y1="{TOP + ph}" x2="{px(t):.1f}" y2="{TOP + ph + 4}" '
                       f'stroke="black"/>')
            out.append(f'<text x="{px(t):.1f}" y="{TOP + ph + 17}" text-anchor="middle" font-size="11" '
                       f'font-family="sans-serif">{t:g}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{H - 10}" text-anchor="middle" font-size="12" '
               f'font-family="sans-serif">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2:.1f}" text-anchor="middle" font-size="12" font-family="sans-serif" '
               f'transform="rotate(-90 16 {TOP + ph / 2:.1f})">{escape(ylabel)}</text>')
    for k, s in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        pts = [(px(x), py(y)) for x, y in zip(s["x"], s["y"]) if math.isfinite(y)]
        if pts:
            d = " ".join(f"{a:.1f},{b:.1f}" for a, b in pts)
            out.append(f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="1.8"/>')
        for i, (x, y) in enumerate(zip(s["x"], s["y"])):
            if not math.isfinite(y):
                continue
            e = (s.get("err") or [None] * len(s["y"]))[i]
            if e:
                out.append(f'<line x1="{px(x):.1f}" y1="{py(y - e):.1f}" x2="{px(x):.1f}" y2="{py(y + e):.1f}" '
                           f'stroke="{color}"/>')
            if len(s["x"]) <= 40:
                out.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="2.5" fill="{color}"/>')
        ly = TOP + 14 + 18 * k
        out.append(f'<line x1="{W - RIGHT + 12}" y1="{ly}" x2="{W - RIGHT + 32}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{W - RIGHT + 37}" y="{ly + 4}" font-size="11" font-family="sans-serif">'
                   f'{escape(str(s["label"]))}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")
    return path
