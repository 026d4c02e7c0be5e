"""Minimal deterministic SVG line charts.

No plotting dependency: the sweep figures are simple polylines, and golden
file tests need byte-identical output, so coordinates are formatted with a
fixed precision and all iteration orders are sorted.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ArgumentError
from .store import _atomic_write_text

WIDTH, HEIGHT = 640, 420
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 60, 160, 30, 45

PALETTE = [
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#9467bd",
    "#ff7f0e",
    "#8c564b",
    "#17becf",
    "#7f7f7f",
]


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def line_chart(
    curves: dict[str, list[tuple[float, float]]],
    title: str,
    x_label: str,
    y_label: str,
    y_range: tuple[float, float] = (0.0, 100.0),
) -> str:
    """Render named curves as an SVG document string."""
    if not curves:
        raise ArgumentError("need at least one curve")
    xs = [x for points in curves.values() for x, _ in points]
    if not xs:
        raise ArgumentError("curves must have at least one point")
    x_min, x_max = min(xs), max(xs)
    x_span = (x_max - x_min) or 1.0
    y_min, y_max = y_range
    y_span = (y_max - y_min) or 1.0
    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def px(x: float) -> float:
        return MARGIN_LEFT + (x - x_min) / x_span * plot_w

    def py(y: float) -> float:
        return MARGIN_TOP + (1.0 - (y - y_min) / y_span) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH // 2}" y="18" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{_escape(title)}</text>',
    ]
    # axes
    x0, y0 = px(x_min), py(y_min)
    x1, y1 = px(x_max), py(y_max)
    parts.append(
        f'<line x1="{_fmt(x0)}" y1="{_fmt(y0)}" x2="{_fmt(x1)}" y2="{_fmt(y0)}" '
        'stroke="black" stroke-width="1"/>'
    )
    parts.append(
        f'<line x1="{_fmt(x0)}" y1="{_fmt(y0)}" x2="{_fmt(x0)}" y2="{_fmt(y1)}" '
        'stroke="black" stroke-width="1"/>'
    )
    for i in range(5):
        ty = y_min + y_span * i / 4
        parts.append(
            f'<text x="{_fmt(x0 - 8)}" y="{_fmt(py(ty) + 4)}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif">{_fmt(ty)}</text>'
        )
        parts.append(
            f'<line x1="{_fmt(x0)}" y1="{_fmt(py(ty))}" x2="{_fmt(x1)}" y2="{_fmt(py(ty))}" '
            'stroke="#dddddd" stroke-width="0.5"/>'
        )
        tx = x_min + x_span * i / 4
        parts.append(
            f'<text x="{_fmt(px(tx))}" y="{_fmt(y0 + 18)}" text-anchor="middle" '
            f'font-size="11" font-family="sans-serif">{_fmt(tx)}</text>'
        )
    parts.append(
        f'<text x="{MARGIN_LEFT + plot_w / 2}" y="{HEIGHT - 8}" text-anchor="middle" '
        f'font-size="12" font-family="sans-serif">{_escape(x_label)}</text>'
    )
    parts.append(
        f'<text x="14" y="{MARGIN_TOP + plot_h / 2}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif" transform="rotate(-90 14 {MARGIN_TOP + plot_h / 2})">'
        f"{_escape(y_label)}</text>"
    )
    for idx, name in enumerate(sorted(curves)):
        color = PALETTE[idx % len(PALETTE)]
        points = sorted(curves[name])
        coords = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in points)
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>'
        )
        ly = MARGIN_TOP + 14 + 16 * idx
        lx = WIDTH - MARGIN_RIGHT + 12
        parts.append(
            f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(
            f'<text x="{lx + 24}" y="{ly}" font-size="11" font-family="sans-serif">'
            f"{_escape(name)}</text>"
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_sweep_svg(path: str | Path, cells, title: str = "score vs scaling factor") -> None:
    """One polyline per (tau, strategy) curve from sweep cells."""
    curves: dict[str, list[tuple[float, float]]] = {}
    for cell in cells:
        curves.setdefault(f"tau={cell.tau} {cell.strategy}", []).append((cell.lam, cell.score))
    _atomic_write_text(Path(path), line_chart(curves, title, "lambda", "score"))
