"""SVG rendering of predictions over lane candidates."""

from __future__ import annotations

import colorsys
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 480
PANEL = 160


def rainbow(u: float) -> str:
    """Color for normalized time ``u`` in [0, 1], red through violet."""
    r, g, b = colorsys.hsv_to_rgb(0.8 * float(np.clip(u, 0, 1)), 0.9, 0.9)
    return f"#{int(r * 255):02x}{int(g * 255):02x}{int(b * 255):02x}"


class _View:
    def __init__(self, pts, width, height, pad=20):
        lo, hi = pts.min(0), pts.max(0)
        span = np.maximum(hi - lo, 1e-6)
        self.s = min((width - 2 * pad) / span[0], (height - 2 * pad) / span[1])
        self.lo, self.pad, self.h = lo, pad, height

    def __call__(self, p):
        p = np.atleast_2d(p)
        x = self.pad + (p[:, 0] - self.lo[0]) * self.s
        y = self.h - self.pad - (p[:, 1] - self.lo[1]) * self.s
        return np.stack([x, y], 1)


def _polyline(pts, stroke, width=1.0, dash=None, opacity=1.0):
    d = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<polyline points="{d}" fill="none" stroke="{stroke}" stroke-width="{width}"'
            f' stroke-opacity="{opacity}"{extra}/>')


def scene_svg(title, lanes, history, future, trajs, bars=None, bar_label="attention",
              gt_index=None) -> str:
    """One figure: lanes in grey, history in black, truth dashed, samples by time color.

    ``lanes`` is a list of (N, 2) arrays (None for fake lanes) in the same
    frame as the trajectories; ``bars`` is one value per lane slot.
    """
    real = [l for l in lanes if l is not None]
    pts = [np.asarray(history)] + [np.asarray(t) for t in trajs]
    if future is not None:
        pts.append(np.asarray(future))
    core = np.vstack(pts)
    lo, hi = core.min(0) - 15, core.max(0) + 15
    clipped = [l[np.all((l >= lo) & (l <= hi), axis=1)] for l in real]
    view = _View(np.vstack([core] + [c for c in clipped if len(c)]), WIDTH - PANEL, HEIGHT)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="8" y="16" font-size="12" font-family="sans-serif">{escape(title)}</text>']
    for c in clipped:
        if len(c) > 1:
            out.append(_polyline(view(c), "#bbbbbb", 3.0))
    out.append(_polyline(view(history), "#000000", 2.0))
    if future is not None:
        out.append(_polyline(view(np.vstack([history[-1:], future])), "#000000", 1.5, "4,3"))
    for traj in trajs:
        traj = np.vstack([history[-1:], np.asarray(traj)])
        xy = view(traj)
        n = len(xy) - 1
        for k in range(n):
            out.append(_polyline(xy[k: k + 2], rainbow(k / max(n - 1, 1)), 1.5, opacity=0.8))
    if bars is not None:
        x0 = WIDTH - PANEL + 10
        out.append(f'<text x="{x0}" y="36" font-size="11" font-family="sans-serif">'
                   f'{escape(bar_label)}</text>')
        bh = min(24.0, (HEIGHT - 60) / max(len(bars), 1))
        for i, v in enumerate(bars):
            y = 46 + i * bh
            w = float(np.clip(v, 0, 1)) * (PANEL - 50)
            fill = "#d62728" if i == gt_index else "#1f77b4"
            out.append(f'<rect x="{x0 + 24}" y="{y:.1f}" width="{w:.2f}" height="{bh * 0.7:.1f}" '
                       f'fill="{fill}"/>')
            out.append(f'<text x="{x0}" y="{y + bh * 0.6:.1f}" font-size="10" '
                       f'font-family="sans-serif">{i}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
