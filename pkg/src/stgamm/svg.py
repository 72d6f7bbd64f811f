"""Plain SVG renderings: heatmaps and line charts, no plotting library needed."""

from __future__ import annotations

from pathlib import Path

import numpy as np

# 12-step terrain-like ramp, low to high
RAMP12 = (
    "#00a600", "#24b300", "#4cbf00", "#7acc00", "#addb00", "#e6e600",
    "#e7c81f", "#e9ba3a", "#ebb055", "#edb48e", "#f0c9c0", "#f2f2f2",
)


def _f(x: float) -> str:
    return f"{x:.2f}"


def heatmap_svg(values: np.ndarray, mask: np.ndarray, path: str | Path, *, vmin: float | None = None,
                vmax: float | None = None, title: str = "", cell: int = 8) -> None:
    """Grid of colored cells; row 0 of ``values`` is drawn at the bottom."""
    values = np.asarray(values, dtype=float)
    ny, nx = values.shape
    shown = values[~mask] if np.any(~mask) else values.ravel()
    lo = float(np.min(shown)) if vmin is None else vmin
    hi = float(np.max(shown)) if vmax is None else vmax
    span = hi - lo if hi > lo else 1.0
    top = 24
    W, H = nx * cell + 120, ny * cell + top + 10
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
           f'<text x="4" y="16" font-size="12">{title}</text>']
    for j in range(ny):
        for i in range(nx):
            if mask[j, i]:
                continue
            k = int(np.clip((values[j, i] - lo) / span * len(RAMP12), 0, len(RAMP12) - 1))
            y = top + (ny - 1 - j) * cell
            out.append(f'<rect x="{i * cell}" y="{y}" width="{cell}" height="{cell}" fill="{RAMP12[k]}"/>')
    for k, col in enumerate(RAMP12):
        y = top + (len(RAMP12) - 1 - k) * 14
        out.append(f'<rect x="{nx * cell + 10}" y="{y}" width="12" height="12" fill="{col}"/>')
        out.append(f'<text x="{nx * cell + 26}" y="{y + 10}" font-size="9">{_f(lo + span * k / len(RAMP12))}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def line_chart_svg(x, series: dict[str, np.ndarray], path: str | Path, *, title: str = "",
                   ylabel: str = "", points: dict[str, np.ndarray] | None = None,
                   width: int = 640, height: int = 360) -> None:
    """Polylines for each named series; optional marker-only series."""
    x = np.asarray(x, dtype=float)
    allv = [np.asarray(v, dtype=float) for v in series.values()]
    if points:
        allv += [np.asarray(v, dtype=float) for v in points.values()]
    finite = np.concatenate([v[np.isfinite(v)] for v in allv]) if allv else np.zeros(1)
    lo, hi = float(finite.min()), float(finite.max())
    if hi <= lo:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 50
    x0, x1 = float(x.min()), float(x.max()) if x.max() > x.min() else float(x.min()) + 1.0

    def px(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def py(v):
        return height - pad - (v - lo) / (hi - lo) * (height - 2 * pad)

    colors = ("#000000", "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b")
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<text x="4" y="16" font-size="12">{title}</text>',
           f'<text x="4" y="{height // 2}" font-size="10">{ylabel}</text>',
           f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="#888"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="#888"/>',
           f'<text x="{pad}" y="{height - pad + 14}" font-size="9">{x0:g}</text>',
           f'<text x="{width - pad}" y="{height - pad + 14}" font-size="9">{x1:g}</text>',
           f'<text x="2" y="{height - pad}" font-size="9">{_f(lo)}</text>',
           f'<text x="2" y="{pad}" font-size="9">{_f(hi)}</text>']
    for k, (name, v) in enumerate(series.items()):
        v = np.asarray(v, dtype=float)
        pts = " ".join(f"{_f(px(a))},{_f(py(b))}" for a, b in zip(x, v) if np.isfinite(b))
        out.append(f'<polyline fill="none" stroke="{colors[k % len(colors)]}" points="{pts}"><title>{name}</title></polyline>')
    for k, (name, v) in enumerate((points or {}).items()):
        for a, b in zip(x, np.asarray(v, dtype=float)):
            if np.isfinite(b):
                out.append(f'<circle cx="{_f(px(a))}" cy="{_f(py(b))}" r="2.5" fill="{colors[k % len(colors)]}"/>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")
