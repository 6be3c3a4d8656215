"""Self-contained SVG line charts (no plotting dependency).

Renders the two standard diagnostics side by side: attention weights over
training batches, and the effective quantization staircase at selected
epochs.
"""

from __future__ import annotations

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]

PANEL_W = 460
PANEL_H = 360
MARGIN = 56


def _escape(text):
    return (str(text).replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;").replace('"', "&quot;"))


def _ticks(lo, hi, count=5):
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / count
    return [lo + i * step for i in range(count + 1)]


class _Panel:
    """One x/y panel with polyline series and a small legend."""

    def __init__(self, x0, title, x_label, y_label, series, y_range=None):
        self.x0 = x0
        self.title = title
        self.x_label = x_label
        self.y_label = y_label
        self.series = series  # list of (label, xs, ys)
        xs_all = [x for _, xs, _ in series for x in xs]
        ys_all = [y for _, _, ys in series for y in ys]
        self.x_lo, self.x_hi = min(xs_all), max(xs_all)
        if self.x_hi == self.x_lo:
            self.x_hi = self.x_lo + 1.0
        if y_range is not None:
            self.y_lo, self.y_hi = y_range
        else:
            self.y_lo, self.y_hi = min(ys_all), max(ys_all)
            pad = 0.05 * (self.y_hi - self.y_lo or 1.0)
            self.y_lo -= pad
            self.y_hi += pad

    def _px(self, x):
        frac = (x - self.x_lo) / (self.x_hi - self.x_lo)
        return self.x0 + MARGIN + frac * (PANEL_W - 2 * MARGIN)

    def _py(self, y):
        frac = (y - self.y_lo) / (self.y_hi - self.y_lo)
        return PANEL_H - MARGIN - frac * (PANEL_H - 2 * MARGIN)

    def render(self):
        left, right = self._px(self.x_lo), self._px(self.x_hi)
        top, bottom = self._py(self.y_hi), self._py(self.y_lo)
        parts = [f'<text x="{(left + right) / 2:.1f}" y="24" text-anchor="middle" '
                 f'font-size="15" font-family="sans-serif">{_escape(self.title)}</text>']
        for y in _ticks(self.y_lo, self.y_hi):
            py = self._py(y)
            parts.append(f'<line x1="{left:.1f}" y1="{py:.1f}" x2="{right:.1f}" y2="{py:.1f}" '
                         f'stroke="#dddddd" stroke-width="1"/>')
            parts.append(f'<text x="{left - 6:.1f}" y="{py + 4:.1f}" text-anchor="end" '
                         f'font-size="10" font-family="sans-serif">{y:.3g}</text>')
        for x in _ticks(self.x_lo, self.x_hi, count=4):
            px = self._px(x)
            parts.append(f'<line x1="{px:.1f}" y1="{bottom:.1f}" x2="{px:.1f}" y2="{bottom + 4:.1f}" '
                         f'stroke="#000000" stroke-width="1"/>')
            parts.append(f'<text x="{px:.1f}" y="{bottom + 16:.1f}" text-anchor="middle" '
                         f'font-size="10" font-family="sans-serif">{x:.4g}</text>')
        parts.append(f'<line x1="{left:.1f}" y1="{bottom:.1f}" x2="{right:.1f}" y2="{bottom:.1f}" '
                     f'stroke="#000000" stroke-width="1.5"/>')
        parts.append(f'<line x1="{left:.1f}" y1="{top:.1f}" x2="{left:.1f}" y2="{bottom:.1f}" '
                     f'stroke="#000000" stroke-width="1.5"/>')
        parts.append(f'<text x="{(left + right) / 2:.1f}" y="{PANEL_H - 8}" text-anchor="middle" '
                     f'font-size="11" font-family="sans-serif">{_escape(self.x_label)}</text>')
        parts.append(f'<text x="{self.x0 + 14}" y="{(top + bottom) / 2:.1f}" text-anchor="middle" '
                     f'font-size="11" font-family="sans-serif" '
                     f'transform="rotate(-90 {self.x0 + 14} {(top + bottom) / 2:.1f})">'
                     f'{_escape(self.y_label)}</text>')
        for i, (label, xs, ys) in enumerate(self.series):
            color = PALETTE[i % len(PALETTE)]
            points = " ".join(f"{self._px(x):.2f},{self._py(y):.2f}" for x, y in zip(xs, ys))
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.8" '
                         f'points="{points}"/>')
            ly = top + 14 + i * 15
            parts.append(f'<line x1="{right - 100:.1f}" y1="{ly}" x2="{right - 80:.1f}" y2="{ly}" '
                         f'stroke="{color}" stroke-width="2.5"/>')
            parts.append(f'<text x="{right - 74:.1f}" y="{ly + 4}" font-size="10" '
                         f'font-family="sans-serif">{_escape(label)}</text>')
        return "\n".join(parts)


def render_two_panel(path, left_panel_args, right_panel_args):
    """Write an SVG 1.1 file with two panels.

    Each panel argument is a dict for ``_Panel`` (title, x_label, y_label,
    series, optional y_range).
    """
    width = 2 * PANEL_W
    panels = [_Panel(0, **left_panel_args), _Panel(PANEL_W, **right_panel_args)]
    body = "\n".join(p.render() for p in panels)
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
           f'width="{width}" height="{PANEL_H}" viewBox="0 0 {width} {PANEL_H}">\n'
           f'<rect x="0" y="0" width="100%" height="100%" fill="#ffffff"/>\n'
           f'{body}\n</svg>\n')
    with open(path, "w") as fh:
        fh.write(svg)
