"""Minimal static SVG line and scatter plots (no plotting backend required)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT, PAD = 480, 360, 48
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _scale(lo, hi):
    if not np.isfinite(lo) or not np.isfinite(hi):
        lo, hi = 0.0, 1.0
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def svg_plot(series, title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    """``series`` is a list of dicts: ``x``, ``y``, optional ``label``, ``kind`` ('line'|'scatter')."""
    xs = np.concatenate([np.asarray(s["x"], float) for s in series]) if series else np.zeros(1)
    ys = np.concatenate([np.asarray(s["y"], float) for s in series]) if series else np.zeros(1)
    ok = np.isfinite(xs) & np.isfinite(ys)
    x0, x1 = _scale(xs[ok].min() if ok.any() else 0.0, xs[ok].max() if ok.any() else 1.0)
    y0, y1 = _scale(ys[ok].min() if ok.any() else 0.0, ys[ok].max() if ok.any() else 1.0)

    def px(x):
        return PAD + (x - x0) / (x1 - x0) * (WIDTH - 2 * PAD)

    def py(y):
        return HEIGHT - PAD - (y - y0) / (y1 - y0) * (HEIGHT - 2 * PAD)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<rect x="{PAD}" y="{PAD}" width="{WIDTH - 2 * PAD}" height="{HEIGHT - 2 * PAD}" '
           'fill="none" stroke="#444"/>']
    if title:
        out.append(f'<text x="{WIDTH / 2}" y="{PAD / 2}" text-anchor="middle" font-size="13">{escape(title)}</text>')
    out.append(f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {HEIGHT / 2})">{escape(ylabel)}</text>')
    for v, anchor in ((x0, "start"), (x1, "end")):
        out.append(f'<text x="{px(v):.1f}" y="{HEIGHT - PAD + 14}" text-anchor="{anchor}">{_fmt(v)}</text>')
    for v in (y0, y1):
        out.append(f'<text x="{PAD - 4}" y="{py(v) + 4:.1f}" text-anchor="end">{_fmt(v)}</text>')
    for i, s in enumerate(series):
        color = s.get("color", PALETTE[i % len(PALETTE)])
        x = np.asarray(s["x"], float)
        y = np.asarray(s["y"], float)
        good = np.isfinite(x) & np.isfinite(y)
        if s.get("kind", "line") == "scatter":
            for a, b in zip(x[good], y[good]):
                out.append(f'<circle cx="{px(a):.1f}" cy="{py(b):.1f}" r="2.5" fill="{color}"/>')
        elif good.sum() > 1:
            pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x[good], y[good]))
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        if s.get("label"):
            ly = PAD + 14 + 14 * i
            out.append(f'<text x="{WIDTH - PAD - 4}" y="{ly}" text-anchor="end" fill="{color}">'
                       f'{escape(s["label"])}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, series, **kw) -> None:
    Path(path).write_text(svg_plot(series, **kw))
