"""Minimal SVG line chart for metric-vs-radius sweeps."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def line_chart_svg(xs, series: dict, title: str = "", xlabel: str = "r", width: int = 480,
                   height: int = 320) -> str:
    pad = 48
    xs = [float(x) for x in xs]
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x1 = x0 + 1.0
    ys = [float(v) for vals in series.values() for v in vals]
    y0, y1 = 0.0, max(1.0, max(ys, default=1.0))

    def px(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2:.1f}" y="{pad / 2:.1f}" text-anchor="middle" font-size="14">{escape(title)}</text>',
             f'<text x="{width / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>']
    for x in xs:
        parts.append(f'<text x="{px(x):.1f}" y="{height - pad + 16}" text-anchor="middle" font-size="10">{x:g}</text>')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = y0 + frac * (y1 - y0)
        parts.append(f'<text x="{pad - 6}" y="{py(y) + 3:.1f}" text-anchor="end" font-size="10">{y:.2f}</text>')
    for n, (name, vals) in enumerate(series.items()):
        color = COLORS[n % len(COLORS)]
        pts = " ".join(f"{px(x):.1f},{py(float(v)):.1f}" for x, v in zip(xs, vals))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * n}" font-size="11" fill="{color}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_line_chart(path, xs, series: dict, **kw) -> Path:
    path = Path(path)
    path.write_text(line_chart_svg(xs, series, **kw), encoding="utf-8")
    return path
