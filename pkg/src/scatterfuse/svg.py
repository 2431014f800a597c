"""Static SVG heatmaps of density fields with defect polygon overlays."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .fusion import DensityField


def heatmap_svg(field: DensityField, polygons=(), title: str = "", width: int = 1200) -> str:
    """Linear grayscale rendering, black = 0, white = field maximum.

    Only nonzero cells are emitted. ``polygons`` is a sequence of
    ``(label, vertices)`` in the field's frame; they are drawn as outlines.
    """
    g, v = field.grid, field.values
    x0, y0 = g.origin.x - g.step_x / 2, g.origin.y - g.step_y / 2
    w_mm, h_mm = g.nx * g.step_x, g.ny * g.step_y
    scale = width / w_mm
    height = max(int(round(h_mm * scale)), 1)
    vmax = float(v.max()) if v.size else 0.0
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 20}" '
           f'viewBox="0 0 {width} {height + 20}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="#000"/>']
    cw, ch = g.step_x * scale, g.step_y * scale
    if vmax > 0:
        rows, cols = np.nonzero(v > 0)
        for i, j in zip(rows.tolist(), cols.tolist()):
            level = int(round(255 * v[i, j] / vmax))
            # SVG y grows downward; flip so +y points up.
            px = j * cw
            py = height - (i + 1) * ch
            out.append(f'<rect x="{px:.3f}" y="{py:.3f}" width="{cw:.3f}" height="{ch:.3f}" '
                       f'fill="rgb({level},{level},{level})"/>')
    for label, verts in polygons:
        verts = np.asarray(verts, dtype=float)
        pts = " ".join(f"{(x - x0) * scale:.3f},{height - (y - y0) * scale:.3f}"
                       for x, y in verts)
        out.append(f'<polygon points="{pts}" fill="none" stroke="#e33" stroke-width="1"/>')
        cx, cy = verts.mean(axis=0)
        out.append(f'<text x="{(cx - x0) * scale:.3f}" y="{height - (cy - y0) * scale - 4:.3f}" '
                   f'font-size="9" fill="#e33">{escape(str(label))}</text>')
    caption = f"{title}  max={vmax:.6g}" if title else f"max={vmax:.6g}"
    out.append(f'<text x="4" y="{height + 14}" font-size="11">{escape(caption)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_heatmap(field: DensityField, path, polygons=(), title: str = "") -> None:
    Path(path).write_text(heatmap_svg(field, polygons, title), encoding="utf-8")
