"""Dependency-free SVG line charts of architecture probabilities."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

from ..searchspace import CANDIDATES

WIDTH, HEIGHT = 640, 400
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 60, 150, 40, 50
COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def emit_plot_svg(rows: Sequence[tuple[int, int, int, float]], title: str = "") -> str:
    """Line chart of probability vs. epoch, one polyline per candidate.

    ``rows`` are trajectory rows ``(epoch, block_id, candidate_id, p)`` for a
    single block covering contiguous epochs.
    """
    if not rows:
        raise ValueError("no trajectory rows to plot")
    blocks = {r[1] for r in rows}
    if len(blocks) != 1:
        raise ValueError(f"rows span several blocks: {sorted(blocks)}")
    block_id = blocks.pop()
    epochs = sorted({r[0] for r in rows})
    if epochs != list(range(epochs[0], epochs[-1] + 1)):
        raise ValueError("trajectory epochs are not contiguous")

    series: dict[int, list[tuple[int, float]]] = {c.candidate_id: [] for c in CANDIDATES}
    for epoch, _, cid, p in sorted(rows):
        series[cid].append((epoch, min(max(p, 0.0), 1.0)))

    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
    e0, e1 = epochs[0], epochs[-1]
    span = max(e1 - e0, 1)

    def sx(epoch: float) -> float:
        return MARGIN_LEFT + (epoch - e0) / span * plot_w

    def sy(p: float) -> float:
        return MARGIN_TOP + (1.0 - p) * plot_h

    title = title or f"Search block {block_id}"
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2 - MARGIN_RIGHT / 2:.2f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<g class="axes" stroke="black" stroke-width="1">'
        f'<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP + plot_h}" x2="{MARGIN_LEFT + plot_w}" y2="{MARGIN_TOP + plot_h}"/>'
        f'<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{MARGIN_TOP + plot_h}"/></g>',
    ]
    for i in range(6):
        p = i / 5
        y = _fmt(sy(p))
        out.append(
            f'<line x1="{MARGIN_LEFT - 4}" y1="{y}" x2="{MARGIN_LEFT}" y2="{y}" stroke="black"/>'
            f'<text x="{MARGIN_LEFT - 8}" y="{y}" text-anchor="end" dominant-baseline="middle">{p:.1f}</text>'
        )
    ticks = sorted({e0 + round(span * i / 5) for i in range(6)} & set(range(e0, e1 + 1))) if e1 > e0 else [e0]
    for epoch in ticks:
        x = _fmt(sx(epoch))
        out.append(
            f'<line x1="{x}" y1="{MARGIN_TOP + plot_h}" x2="{x}" y2="{MARGIN_TOP + plot_h + 4}" stroke="black"/>'
            f'<text x="{x}" y="{MARGIN_TOP + plot_h + 18}" text-anchor="middle">{epoch}</text>'
        )
    out.append(f'<text x="{MARGIN_LEFT + plot_w / 2:.2f}" y="{HEIGHT - 10}" text-anchor="middle">epoch</text>')
    out.append(
        f'<text x="15" y="{MARGIN_TOP + plot_h / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 15 {MARGIN_TOP + plot_h / 2:.2f})">probability</text>'
    )

    for op in CANDIDATES:
        cid = op.candidate_id
        color = COLORS[cid]
        points = " ".join(f"{_fmt(sx(e))},{_fmt(sy(p))}" for e, p in series[cid])
        out.append(
            f'<polyline data-candidate="{cid}" fill="none" stroke="{color}" stroke-width="1.5" points="{points}">'
            f"<title>{op.label}</title></polyline>"
        )
        if len(series[cid]) == 1:
            e, p = series[cid][0]
            out.append(f'<circle cx="{_fmt(sx(e))}" cy="{_fmt(sy(p))}" r="2.5" fill="{color}"/>')
        ly = MARGIN_TOP + 10 + 18 * cid
        lx = MARGIN_LEFT + plot_w + 15
        out.append(
            f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>'
            f'<text x="{lx + 26}" y="{ly}" dominant-baseline="middle">{op.label}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
