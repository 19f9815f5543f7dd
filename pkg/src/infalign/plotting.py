"""Win-rate vs KL charts.

The SVG writer has no dependencies.  A PNG copy via matplotlib is optional
and only attempted when requested.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
           "#7f7f7f", "#bcbd22")

WIDTH, HEIGHT = 640, 440
LEFT, RIGHT, TOP, BOTTOM = 64, 170, 36, 52
WIN_RANGE = (0.4, 1.0)


def _nice_ticks(hi: float, count: int = 5) -> list[float]:
    if hi <= 0:
        return [0.0]
    raw = hi / count
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    n = int(math.floor(hi / step + 1e-9))
    return [i * step for i in range(n + 1)]


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".") if x != int(x) else str(int(x))


def tradeoff_svg(series: dict, title: str = "") -> str:
    """Render ``{label: [(kl, win_rate), ...]}`` as one polyline per label.

    The y axis spans win rate 0.4 to 1 and the x axis KL from 0 to the
    largest KL present.  Points outside the y range are clipped.
    """
    kl_max = max((kl for pts in series.values() for kl, _ in pts), default=1.0)
    if not kl_max > 0:
        kl_max = 1.0
    ticks = _nice_ticks(kl_max)
    x_hi = max(kl_max, ticks[-1])
    pw = WIDTH - LEFT - RIGHT
    ph = HEIGHT - TOP - BOTTOM
    y_lo, y_hi = WIN_RANGE

    def sx(kl):
        return LEFT + pw * kl / x_hi

    def sy(w):
        w = min(max(w, y_lo), y_hi)
        return TOP + ph * (y_hi - w) / (y_hi - y_lo)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{LEFT + pw / 2:.1f}" y="20" text-anchor="middle" font-size="14">'
                   f'{escape(title)}</text>')
    out.append(f'<g class="axes" stroke="black" fill="none">'
               f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}"/></g>')
    grid = ['<g class="ticks">']
    for t in ticks:
        x = sx(t)
        grid.append(f'<line x1="{x:.2f}" y1="{TOP + ph}" x2="{x:.2f}" y2="{TOP + ph + 5}" stroke="black"/>')
        grid.append(f'<text x="{x:.2f}" y="{TOP + ph + 18}" text-anchor="middle">{_fmt(t)}</text>')
    for i in range(7):
        w = y_lo + i * 0.1
        y = sy(w)
        grid.append(f'<line x1="{LEFT - 5}" y1="{y:.2f}" x2="{LEFT}" y2="{y:.2f}" stroke="black"/>')
        grid.append(f'<line x1="{LEFT}" y1="{y:.2f}" x2="{LEFT + pw}" y2="{y:.2f}" stroke="#e0e0e0"/>')
        grid.append(f'<text x="{LEFT - 8}" y="{y + 4:.2f}" text-anchor="end">{w:.1f}</text>')
    grid.append("</g>")
    out.extend(grid)
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">KL divergence</text>')
    out.append(f'<text transform="translate(16 {TOP + ph / 2:.1f}) rotate(-90)" text-anchor="middle">'
               f'win rate</text>')
    for i, (label, pts) in enumerate(series.items()):
        colour = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(kl):.2f},{sy(w):.2f}" for kl, w in sorted(pts))
        out.append(f'<polyline class="curve" data-label="{escape(label)}" points="{coords}" '
                   f'fill="none" stroke="{colour}" stroke-width="2"/>')
        ly = TOP + 14 + 18 * i
        out.append(f'<line x1="{LEFT + pw + 12}" y1="{ly - 4}" x2="{LEFT + pw + 32}" y2="{ly - 4}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{LEFT + pw + 38}" y="{ly}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def tradeoff_png(series: dict, title: str = "") -> bytes:
    """Same chart through matplotlib; raises ImportError when it is missing."""
    import io

    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    # fixed metadata keeps the bytes stable across runs
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    for label, pts in series.items():
        pts = sorted(pts)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=label)
    ax.set_xlim(left=0)
    ax.set_ylim(*WIN_RANGE)
    ax.set_xlabel("KL divergence")
    ax.set_ylabel("win rate")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return buf.getvalue()
