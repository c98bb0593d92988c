"""Tiny deterministic SVG line charts (no plotting dependency, bit-stable)."""

from __future__ import annotations

WIDTH, HEIGHT = 520, 340
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 60, 20, 30, 50
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def line_chart(series: dict[str, list[tuple[float, float]]], title: str,
               x_label: str, y_label: str, y_range=(0.0, 100.0)) -> str:
    """Render named (x, y) series as an SVG string with axes and a legend."""
    xs = [x for pts in series.values() for x, _ in pts]
    x_lo, x_hi = min(xs), max(xs)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    y_lo, y_hi = y_range
    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B

    def sx(x):
        return MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y):
        return MARGIN_T + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH // 2}" y="18" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{title}</text>',
    ]
    # axes
    x0, y0 = MARGIN_L, HEIGHT - MARGIN_B
    parts.append(f'<line x1="{x0}" y1="{MARGIN_T}" x2="{x0}" y2="{y0}" stroke="black"/>')
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{WIDTH - MARGIN_R}" y2="{y0}" stroke="black"/>')
    for i in range(5):
        yv = y_lo + i * (y_hi - y_lo) / 4.0
        parts.append(
            f'<text x="{x0 - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end" font-size="10" '
            f'font-family="sans-serif">{_fmt(yv)}</text>'
        )
        parts.append(
            f'<line x1="{x0}" y1="{sy(yv):.1f}" x2="{WIDTH - MARGIN_R}" y2="{sy(yv):.1f}" '
            f'stroke="#dddddd"/>'
        )
    for x in sorted({x for pts in series.values() for x, _ in pts}):
        parts.append(
            f'<text x="{sx(x):.1f}" y="{y0 + 16}" text-anchor="middle" font-size="10" '
            f'font-family="sans-serif">{_fmt(x)}</text>'
        )
    parts.append(
        f'<text x="{(MARGIN_L + WIDTH - MARGIN_R) // 2}" y="{HEIGHT - 12}" text-anchor="middle" '
        f'font-size="12" font-family="sans-serif">{x_label}</text>'
    )
    parts.append(
        f'<text x="16" y="{(MARGIN_T + y0) // 2}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 16 {(MARGIN_T + y0) // 2})">{y_label}</text>'
    )
    for si, (name, pts) in enumerate(sorted(series.items())):
        color = COLORS[si % len(COLORS)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in sorted(pts))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="{color}"/>')
        lx = WIDTH - MARGIN_R - 130
        ly = MARGIN_T + 14 + 16 * si
        parts.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 28}" y="{ly}" font-size="11" '
                     f'font-family="sans-serif">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
