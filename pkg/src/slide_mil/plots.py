"""Dependency-free SVG rendering of ROC curves.

Output is a pure function of the inputs (fixed number formatting, no
timestamps), so repeated runs give byte-identical files.
"""

from __future__ import annotations

from typing import Sequence

from .metrics import RocCurve

_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_SIZE = 360
_PAD = 48


def _xy(fpr: float, tpr: float) -> str:
    span = _SIZE - 2 * _PAD
    return f"{_PAD + fpr * span:.2f},{_SIZE - _PAD - tpr * span:.2f}"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def roc_svg(curves: Sequence[tuple[str, RocCurve, float]], title: str = "ROC") -> str:
    """Render ``(name, curve, auc)`` triples as one SVG document."""
    span = _SIZE - 2 * _PAD
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SIZE}" height="{_SIZE}" '
        f'viewBox="0 0 {_SIZE} {_SIZE}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{_SIZE}" height="{_SIZE}" fill="white"/>',
        f'<text x="{_SIZE / 2:.0f}" y="20" text-anchor="middle" font-size="13">{_escape(title)}</text>',
        f'<rect x="{_PAD}" y="{_PAD}" width="{span}" height="{span}" fill="none" stroke="black"/>',
        f'<path d="M{_xy(0, 0)} L{_xy(1, 1)}" stroke="#999999" stroke-dasharray="4 3" fill="none"/>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        x, _ = _xy(tick, 0).split(",")
        _, y = _xy(0, tick).split(",")
        lines.append(f'<text x="{x}" y="{_SIZE - _PAD + 14}" text-anchor="middle">{tick:.2f}</text>')
        lines.append(f'<text x="{_PAD - 6}" y="{float(y) + 4:.2f}" text-anchor="end">{tick:.2f}</text>')
    lines.append(f'<text x="{_SIZE / 2:.0f}" y="{_SIZE - 12}" text-anchor="middle">False positive rate</text>')
    lines.append(
        f'<text x="14" y="{_SIZE / 2:.0f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {_SIZE / 2:.0f})">True positive rate</text>'
    )
    for i, (name, curve, auc) in enumerate(curves):
        colour = _COLOURS[i % len(_COLOURS)]
        pts = " L".join(_xy(f, t) for f, t in zip(curve.fpr, curve.tpr))
        lines.append(f'<path d="M{pts}" stroke="{colour}" stroke-width="2" fill="none"/>')
        ly = _SIZE - _PAD - 10 - 14 * (len(curves) - 1 - i)
        lines.append(
            f'<text x="{_SIZE - _PAD - 6}" y="{ly}" text-anchor="end" fill="{colour}">'
            f"{_escape(name)} (AUC {auc:.3f})</text>"
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"
