"""Plain SVG rendering of an explanation: node-score bars and delay-score stems."""

from __future__ import annotations

import json
from html import escape
from typing import Any


def _color(v: float) -> str:
    """White to dark blue for v in [0, 1]."""
    v = min(max(v, 0.0), 1.0)
    r = int(round(255 - 215 * v))
    g = int(round(255 - 175 * v))
    b = int(round(255 - 75 * v))
    return f"#{r:02x}{g:02x}{b:02x}"


def explanation_svg(doc: dict[str, Any], node_ids: list[str], resolution_min: int) -> str:
    spatial = doc["spatial"]
    cells = doc["cells"]
    width = max(640, 40 + 28 * len(node_ids))
    bar_h = 40
    stem_h = 140
    height = 90 + bar_h + len(cells) * (stem_h + 40)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f"<desc>{escape(json.dumps(doc.get('manifest', {}), sort_keys=True))}</desc>",
        f'<text x="20" y="20" font-size="14">Spatial attention for node {escape(str(doc["node"]))}, '
        f'step {doc["horizon_step"] + 1}</text>',
    ]
    top = 35
    cw = (width - 40) / max(len(node_ids), 1)
    peak = max(spatial.values(), default=1.0) or 1.0
    for i, nid in enumerate(node_ids):
        v = spatial.get(nid, 0.0)
        x = 20 + i * cw
        out.append(
            f'<rect x="{x:.1f}" y="{top}" width="{cw:.1f}" height="{bar_h}" fill="{_color(v / peak)}" stroke="#999">'
            f"<title>{escape(nid)}: {v:.6f}</title></rect>"
        )
        if len(node_ids) <= 40:
            out.append(f'<text x="{x + cw / 2:.1f}" y="{top + bar_h + 12}" text-anchor="middle" font-size="8">{escape(nid)}</text>')
    y0 = top + bar_h + 40
    for cell in cells:
        i, j = cell["cell"]
        out.append(
            f'<text x="20" y="{y0}" font-size="12">Temporal attention, cell ({i},{j}), '
            f'CAM weight {cell["cam_weight"]:.4f}</text>'
        )
        base = y0 + stem_h
        delays, scores = cell["delays"], cell["scores"]
        span = max(delays, default=1) or 1
        out.append(f'<line x1="30" y1="{base}" x2="{width - 20}" y2="{base}" stroke="#333"/>')
        for d, s in zip(delays, scores):
            x = 30 + (width - 60) * d / span
            y = base - (stem_h - 20) * s
            out.append(f'<line x1="{x:.1f}" y1="{base}" x2="{x:.1f}" y2="{y:.1f}" stroke="#1f4e9a" stroke-width="2"/>')
            out.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3" fill="#1f4e9a"><title>delay {d}: {s:.6f}</title></circle>')
            out.append(f'<text x="{x:.1f}" y="{base + 12}" text-anchor="middle" font-size="8">{d}</text>')
        y0 = base + 40
    out.append("</svg>")
    return "\n".join(out) + "\n"
