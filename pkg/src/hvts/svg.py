"""Minimal SVG line plots and heatmaps, written as plain text."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

__all__ = ["line_plot", "heatmap"]

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#7f7f7f")


def _frame(width, height, title, body):
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>\n'
        + body
        + "</svg>\n"
    )


def line_plot(series: dict, title: str = "", xlabel: str = "", ylabel: str = "", x=None, logy=False,
              width=640, height=400) -> str:
    """One polyline per ``name -> values`` entry on shared axes."""
    left, right, top, bottom = 60, 20, 28, 40
    pw, ph = width - left - right, height - top - bottom
    ys = {k: np.asarray(v, dtype=float) for k, v in series.items()}
    if logy:
        ys = {k: np.log10(np.where(v > 0, v, np.nan)) for k, v in ys.items()}
    n = max((v.size for v in ys.values()), default=1)
    xs = np.arange(n, dtype=float) if x is None else np.asarray(x, dtype=float)
    finite = np.concatenate([v[np.isfinite(v)] for v in ys.values()] or [np.zeros(1)])
    lo, hi = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    xlo, xhi = xs.min(), xs.max() if xs.max() > xs.min() else xs.min() + 1
    sx = lambda v: left + (v - xlo) / (xhi - xlo) * pw
    sy = lambda v: top + (1 - (v - lo) / (hi - lo)) * ph
    body = [
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>\n',
        f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>\n',
        f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel + (" (log10)" if logy else ""))}</text>\n',
    ]
    for frac in (0.0, 0.5, 1.0):
        yv = lo + frac * (hi - lo)
        xv = xlo + frac * (xhi - xlo)
        body.append(f'<text x="{left - 4}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>\n')
        body.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 14}" text-anchor="middle">{xv:.3g}</text>\n')
    for k, (name, v) in enumerate(ys.items()):
        pts = " ".join(f"{sx(xs[i]):.2f},{sy(v[i]):.2f}" for i in range(v.size) if np.isfinite(v[i]))
        color = _COLORS[k % len(_COLORS)]
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>\n')
        body.append(f'<text x="{left + 8}" y="{top + 14 + 13 * k}" fill="{color}">{escape(str(name))}</text>\n')
    return _frame(width, height, title, "".join(body))


def heatmap(values, title: str = "", width=640, height=400) -> str:
    """Grey-scale rendering of a matrix (darker is larger)."""
    v = np.asarray(values, dtype=float)
    R, C = v.shape
    left, top = 40, 28
    cw, ch = (width - left - 10) / C, (height - top - 10) / R
    lo, hi = np.nanmin(v), np.nanmax(v)
    scale = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    cells = []
    for r in range(R):
        for c in range(C):
            g = int(round(255 * (1 - scale[r, c])))
            cells.append(
                f'<rect x="{left + c * cw:.2f}" y="{top + r * ch:.2f}" width="{cw:.2f}" '
                f'height="{ch:.2f}" fill="rgb({g},{g},{g})"/>\n'
            )
    return _frame(width, height, f"{title} [{lo:.3g}, {hi:.3g}]", "".join(cells))
