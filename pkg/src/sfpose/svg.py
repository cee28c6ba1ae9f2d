"""Dependency-free SVG charts (step histograms and line plots)."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

W, H, PAD = 480, 300, 44
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def _axes(xlo, xhi, ylo, yhi, title, xlabel, ylabel):
    sx = lambda x: PAD + (x - xlo) / max(xhi - xlo, 1e-12) * (W - 2 * PAD)
    sy = lambda y: H - PAD - (y - ylo) / max(yhi - ylo, 1e-12) * (H - 2 * PAD)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<text x="{W / 2}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
             f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
             f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
             f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle">{escape(xlabel)}</text>',
             f'<text x="12" y="{H / 2}" text-anchor="middle" transform="rotate(-90 12 {H / 2})">{escape(ylabel)}</text>']
    for t in np.linspace(xlo, xhi, 5):
        parts.append(f'<text x="{sx(t):.1f}" y="{H - PAD + 14}" text-anchor="middle">{t:.3g}</text>')
    for t in np.linspace(ylo, yhi, 5):
        parts.append(f'<text x="{PAD - 4}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    return parts, sx, sy


def _legend(parts, labels):
    for i, lab in enumerate(labels):
        y = PAD + 14 * i
        c = COLORS[i % len(COLORS)]
        parts.append(f'<rect x="{W - PAD - 110}" y="{y - 8}" width="10" height="10" fill="{c}" fill-opacity="0.5"/>')
        parts.append(f'<text x="{W - PAD - 96}" y="{y + 1}">{escape(lab)}</text>')


def histogram_overlay(edges: np.ndarray, counts: dict[str, np.ndarray], title: str = "",
                      xlabel: str = "score", ylabel: str = "count") -> str:
    """Overlaid filled step histograms sharing ``edges``."""
    edges = np.asarray(edges, dtype=float)
    ymax = max(float(np.max(c)) for c in counts.values()) or 1.0
    parts, sx, sy = _axes(edges[0], edges[-1], 0.0, ymax, title, xlabel, ylabel)
    for i, (label, c) in enumerate(counts.items()):
        pts = [(sx(edges[0]), sy(0))]
        for j, v in enumerate(c):
            pts += [(sx(edges[j]), sy(v)), (sx(edges[j + 1]), sy(v))]
        pts.append((sx(edges[-1]), sy(0)))
        path = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        col = COLORS[i % len(COLORS)]
        parts.append(f'<polygon points="{path}" fill="{col}" fill-opacity="0.4" stroke="{col}"/>')
    _legend(parts, list(counts))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def line_plot(series: dict[str, tuple[np.ndarray, np.ndarray]], title: str = "",
              xlabel: str = "", ylabel: str = "") -> str:
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    ys = ys[np.isfinite(ys)]
    lo, hi = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    parts, sx, sy = _axes(float(xs.min()), float(xs.max()), lo, hi if hi > lo else lo + 1, title, xlabel, ylabel)
    for i, (label, (x, y)) in enumerate(series.items()):
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y) if np.isfinite(b))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{COLORS[i % len(COLORS)]}" stroke-width="1.5"/>')
    _legend(parts, list(series))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
