"""Tiny dependency-free SVG line plot for the outlier sweep."""

from __future__ import annotations

WIDTH, HEIGHT = 640, 480
MARGIN = 60
SERIES = (("auc1", "#d62728", "AUC@1px"),
          ("auc5", "#2ca02c", "AUC@5px"),
          ("auc10", "#1f77b4", "AUC@10px"))


def _x(ratio: float) -> float:
    return MARGIN + ratio * (WIDTH - 2 * MARGIN)


def _y(auc: float) -> float:
    return HEIGHT - MARGIN - (auc / 100.0) * (HEIGHT - 2 * MARGIN)


def render_sweep_svg(rows) -> str:
    """One polyline per pixel threshold; x = outlier ratio, y = AUC %."""
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" '
        f'y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" '
        f'stroke="black"/>',
        f'<text x="{WIDTH // 2}" y="{HEIGHT - 15}" text-anchor="middle" '
        f'font-size="14">outlier ratio</text>',
        f'<text x="18" y="{HEIGHT // 2}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 18 {HEIGHT // 2})">reprojection AUC (%)</text>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(f'<text x="{_x(tick):.1f}" y="{HEIGHT - MARGIN + 20}" '
                     f'text-anchor="middle" font-size="12">{tick:g}</text>')
    for tick in (0, 25, 50, 75, 100):
        parts.append(f'<text x="{MARGIN - 8}" y="{_y(tick) + 4:.1f}" '
                     f'text-anchor="end" font-size="12">{tick}</text>')
    for attr, color, label in SERIES:
        pts = " ".join(f"{_x(row.ratio):.3f},{_y(getattr(row, attr)):.3f}" for row in rows)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" '
                     f'points="{pts}"/>')
    for i, (_, color, label) in enumerate(SERIES):
        y = MARGIN + 18 * i
        parts.append(f'<line x1="{WIDTH - MARGIN - 130}" y1="{y}" '
                     f'x2="{WIDTH - MARGIN - 100}" y2="{y}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{WIDTH - MARGIN - 92}" y="{y + 4}" '
                     f'font-size="12">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
