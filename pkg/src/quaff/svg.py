"""Self-contained SVG charts: no external renderer, no scripts, one file
per figure.

`line_chart` draws any number of labelled series; non-finite y values
split a series into separate segments (gaps render as breaks, not
interpolated bridges).  Optional shaded bands show mean +/- deviation
envelopes.  `bar_chart` stacks one or more labelled bar panels in a
single canvas.
"""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = (
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#9467bd",
    "#ff7f0e",
    "#8c564b",
    "#17becf",
    "#7f7f7f",
    "#bcbd22",
    "#e377c2",
)

_FONT = 'font-family="Helvetica,Arial,sans-serif"'


def _finite(v) -> bool:
    return v is not None and math.isfinite(v)


def _fmt(v: float) -> str:
    if v == 0:
        return "0"
    a = abs(v)
    if a >= 1e5 or a < 1e-3:
        return f"{v:.1e}"
    if a >= 100:
        return f"{v:.0f}"
    if a >= 1:
        return f"{v:.4g}"
    return f"{v:.3g}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min(s * mag for s in (1, 2, 5, 10) if s * mag >= raw)
    first = math.ceil(lo / step) * step
    out = []
    t = first
    while t <= hi + step * 1e-9:
        out.append(round(t, 12))
        t += step
    return out


class _Frame:
    """Maps data space onto a margined plot rectangle."""

    def __init__(self, width, height, x_range, y_range):
        self.width = width
        self.height = height
        self.left, self.right, self.top, self.bottom = 62.0, 18.0, 34.0, 46.0
        x0, x1 = x_range
        y0, y1 = y_range
        if x1 <= x0:
            x0, x1 = x0 - 0.5, x1 + 0.5
        if y1 <= y0:
            y0, y1 = y0 - 0.5, y1 + 0.5
        pad = 0.04 * (y1 - y0)
        self.x0, self.x1 = x0, x1
        self.y0, self.y1 = y0 - pad, y1 + pad

    def x(self, v: float) -> float:
        w = self.width - self.left - self.right
        return self.left + (v - self.x0) / (self.x1 - self.x0) * w

    def y(self, v: float) -> float:
        h = self.height - self.top - self.bottom
        return self.height - self.bottom - (v - self.y0) / (self.y1 - self.y0) * h


def _axes(fr: _Frame, title, xlabel, ylabel) -> list[str]:
    e = []
    bx, by = fr.height - fr.bottom, fr.left
    e.append(
        f'<rect x="0" y="0" width="{fr.width}" height="{fr.height}" fill="white"/>'
    )
    e.append(
        f'<line x1="{by}" y1="{bx}" x2="{fr.width - fr.right}" y2="{bx}" stroke="#333"/>'
    )
    e.append(f'<line x1="{by}" y1="{fr.top}" x2="{by}" y2="{bx}" stroke="#333"/>')
    for t in _ticks(fr.x0, fr.x1):
        px = fr.x(t)
        e.append(f'<line x1="{px:.1f}" y1="{bx}" x2="{px:.1f}" y2="{bx + 4}" stroke="#333"/>')
        e.append(
            f'<text x="{px:.1f}" y="{bx + 16}" {_FONT} font-size="10" '
            f'text-anchor="middle">{_fmt(t)}</text>'
        )
    for t in _ticks(fr.y0, fr.y1):
        py = fr.y(t)
        e.append(f'<line x1="{by - 4}" y1="{py:.1f}" x2="{by}" y2="{py:.1f}" stroke="#333"/>')
        e.append(
            f'<text x="{by - 7}" y="{py + 3:.1f}" {_FONT} font-size="10" '
            f'text-anchor="end">{_fmt(t)}</text>'
        )
        e.append(
            f'<line x1="{by}" y1="{py:.1f}" x2="{fr.width - fr.right}" y2="{py:.1f}" '
            f'stroke="#eee"/>'
        )
    e.append(
        f'<text x="{fr.width / 2}" y="18" {_FONT} font-size="13" '
        f'text-anchor="middle">{escape(title)}</text>'
    )
    e.append(
        f'<text x="{fr.width / 2}" y="{fr.height - 8}" {_FONT} font-size="11" '
        f'text-anchor="middle">{escape(xlabel)}</text>'
    )
    e.append(
        f'<text x="14" y="{fr.height / 2}" {_FONT} font-size="11" text-anchor="middle" '
        f'transform="rotate(-90 14 {fr.height / 2})">{escape(ylabel)}</text>'
    )
    return e


def _segments(xs, ys):
    seg = []
    for x, y in zip(xs, ys):
        if _finite(y):
            seg.append((x, y))
        elif seg:
            yield seg
            seg = []
    if seg:
        yield seg


def line_chart(
    path,
    title: str,
    xlabel: str,
    ylabel: str,
    series,
    bands=None,
    width: int = 720,
    height: int = 420,
) -> None:
    """Write a multi-series line chart.

    Args:
        series: iterable of ``(label, xs, ys)``; None/NaN ys break the line.
        bands: optional iterable of ``(label, xs, lo, hi)`` shaded envelopes,
            colored to match the series with the same label.
    """
    series = list(series)
    bands = list(bands) if bands else []
    all_x = [x for _, xs, _ in series for x in xs]
    all_y = [y for _, _, ys in series for y in ys if _finite(y)]
    for _, xs, lo, hi in bands:
        all_x += list(xs)
        all_y += [v for v in list(lo) + list(hi) if _finite(v)]
    if not all_x or not all_y:
        all_x, all_y = [0.0, 1.0], [0.0, 1.0]
    fr = _Frame(width, height, (min(all_x), max(all_x)), (min(all_y), max(all_y)))
    e = _axes(fr, title, xlabel, ylabel)

    color_of = {}
    for i, (label, _, _) in enumerate(series):
        color_of.setdefault(label, PALETTE[i % len(PALETTE)])

    for label, xs, lo, hi in bands:
        color = color_of.setdefault(label, PALETTE[len(color_of) % len(PALETTE)])
        pts = [
            (x, l, h)
            for x, l, h in zip(xs, lo, hi)
            if _finite(l) and _finite(h)
        ]
        if not pts:
            continue
        upper = " ".join(f"{fr.x(x):.1f},{fr.y(h):.1f}" for x, _, h in pts)
        lower = " ".join(f"{fr.x(x):.1f},{fr.y(l):.1f}" for x, l, _ in reversed(pts))
        e.append(
            f'<polygon points="{upper} {lower}" fill="{color}" opacity="0.15" '
            f'stroke="none"/>'
        )

    for label, xs, ys in series:
        color = color_of[label]
        for seg in _segments(xs, ys):
            if len(seg) == 1:
                x, y = seg[0]
                e.append(
                    f'<circle cx="{fr.x(x):.1f}" cy="{fr.y(y):.1f}" r="2" '
                    f'fill="{color}"/>'
                )
            else:
                pts = " ".join(f"{fr.x(x):.1f},{fr.y(y):.1f}" for x, y in seg)
                e.append(
                    f'<polyline points="{pts}" fill="none" stroke="{color}" '
                    f'stroke-width="1.5"/>'
                )

    for i, label in enumerate(color_of):
        lx = width - fr.right - 150
        ly = fr.top + 8 + 14 * i
        e.append(
            f'<line x1="{lx}" y1="{ly}" x2="{lx + 18}" y2="{ly}" '
            f'stroke="{color_of[label]}" stroke-width="2"/>'
        )
        e.append(
            f'<text x="{lx + 23}" y="{ly + 3}" {_FONT} font-size="10">'
            f"{escape(str(label))}</text>"
        )

    _write_svg(path, width, height, e)


def bar_chart(path, panels, width: int = 720, panel_height: int = 300) -> None:
    """Write stacked bar panels: ``panels = [(title, ylabel, labels, values)]``."""
    panels = list(panels)
    height = panel_height * len(panels)
    e = [f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    for pi, (title, ylabel, labels, values) in enumerate(panels):
        top = pi * panel_height
        vals = [v if _finite(v) else 0.0 for v in values]
        vmax = max(vals + [1e-12])
        fr = _Frame(width, panel_height, (0, 1), (0, vmax))
        base = top + panel_height - fr.bottom
        e.append(
            f'<line x1="{fr.left}" y1="{base}" x2="{width - fr.right}" y2="{base}" '
            f'stroke="#333"/>'
        )
        for t in _ticks(fr.y0, fr.y1):
            if t < 0:
                continue
            py = top + fr.y(t)
            e.append(
                f'<line x1="{fr.left - 4}" y1="{py:.1f}" x2="{fr.left}" y2="{py:.1f}" '
                f'stroke="#333"/>'
            )
            e.append(
                f'<text x="{fr.left - 7}" y="{py + 3:.1f}" {_FONT} font-size="10" '
                f'text-anchor="end">{_fmt(t)}</text>'
            )
        e.append(
            f'<text x="{width / 2}" y="{top + 18}" {_FONT} font-size="13" '
            f'text-anchor="middle">{escape(title)}</text>'
        )
        e.append(
            f'<text x="14" y="{top + panel_height / 2}" {_FONT} font-size="11" '
            f'text-anchor="middle" transform="rotate(-90 14 {top + panel_height / 2})">'
            f"{escape(ylabel)}</text>"
        )
        n = max(len(vals), 1)
        span = (width - fr.left - fr.right) / n
        bw = span * 0.6
        for i, (label, v) in enumerate(zip(labels, vals)):
            cx = fr.left + span * (i + 0.5)
            py = top + fr.y(v)
            e.append(
                f'<rect x="{cx - bw / 2:.1f}" y="{py:.1f}" width="{bw:.1f}" '
                f'height="{base - py:.1f}" fill="{PALETTE[i % len(PALETTE)]}"/>'
            )
            e.append(
                f'<text x="{cx:.1f}" y="{base + 14}" {_FONT} font-size="10" '
                f'text-anchor="middle">{escape(str(label))}</text>'
            )
            e.append(
                f'<text x="{cx:.1f}" y="{py - 4:.1f}" {_FONT} font-size="9" '
                f'text-anchor="middle">{_fmt(v)}</text>'
            )
    _write_svg(path, width, height, e)


def _write_svg(path, width, height, elements) -> None:
    body = "\n".join(elements)
    doc = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n{body}\n</svg>\n'
    )
    with open(path, "w", encoding="utf-8") as f:
        f.write(doc)
