"""Minimal static SVG charts: scatter with intervals, age pyramid, caterpillar."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

_PALETTE = ("#1b6ca8", "#d1495b", "#66a182", "#edae49", "#6c757d")
W, H, PAD = 480, 400, 50


def _scale(lo, hi, a, b):
    span = hi - lo if hi > lo else 1.0
    return lambda v: a + (np.asarray(v, dtype=float) - lo) / span * (b - a)


def _doc(body, width=W, height=H):
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
        + "\n".join(body)
        + "\n</svg>\n"
    )


def _axes(title, xlabel, ylabel, width=W, height=H):
    return [
        f'<rect x="{PAD}" y="{PAD / 2}" width="{width - 1.5 * PAD}" height="{height - 1.5 * PAD}" fill="none" stroke="#333"/>',
        f'<text x="{width / 2}" y="15" text-anchor="middle">{escape(title)}</text>',
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="12" y="{height / 2}" text-anchor="middle" transform="rotate(-90 12 {height / 2})">{escape(ylabel)}</text>',
    ]


def scatter_svg(path, observed, mean, lo, hi, groups=None, title="Observed vs predicted"):
    obs, mean, lo, hi = (np.asarray(a, dtype=float) for a in (observed, mean, lo, hi))
    groups = np.asarray(groups if groups is not None else ["all"] * obs.size, dtype=object)
    top = float(np.nanmax(np.r_[obs, hi])) if obs.size else 1.0
    sx = _scale(0, top, PAD, W - PAD / 2)
    sy = _scale(0, top, H - PAD, PAD / 2)
    body = _axes(title, "observed", "predicted")
    body.append(f'<line x1="{sx(0)}" y1="{sy(0)}" x2="{sx(top)}" y2="{sy(top)}" stroke="#999" stroke-dasharray="4"/>')
    for k, g in enumerate(sorted(set(groups.tolist()))):
        colour = _PALETTE[k % len(_PALETTE)]
        sel = groups == g
        for o, m, l, h in zip(obs[sel], mean[sel], lo[sel], hi[sel]):
            body.append(f'<line x1="{sx(o):.1f}" y1="{sy(l):.1f}" x2="{sx(o):.1f}" y2="{sy(h):.1f}" stroke="{colour}" stroke-opacity="0.4"/>')
            body.append(f'<circle cx="{sx(o):.1f}" cy="{sy(m):.1f}" r="2" fill="{colour}"/>')
        body.append(f'<text x="{PAD + 8}" y="{PAD + 14 * (k + 1)}" fill="{colour}">{escape(str(g))}</text>')
    Path(path).write_text(_doc(body))


def pyramid_svg(path, proportions, labels, title="Age-sex structure"):
    """Horizontal bars: first half of ``proportions`` male (left), second female (right)."""
    p = np.asarray(proportions, dtype=float)
    half = p.size // 2
    male, female = p[:half], p[half:]
    top = float(max(male.max(), female.max())) if p.size else 1.0
    mid = W / 2
    sx = _scale(0, top, 0, W / 2 - PAD)
    bar = (H - 1.5 * PAD) / max(half, 1)
    body = _axes(title, "proportion", "age band")
    for i in range(half):
        y = H - PAD - (i + 1) * bar
        body.append(f'<rect x="{mid - sx(male[i]):.1f}" y="{y:.1f}" width="{sx(male[i]):.1f}" height="{bar * 0.9:.1f}" fill="{_PALETTE[0]}"/>')
        body.append(f'<rect x="{mid:.1f}" y="{y:.1f}" width="{sx(female[i]):.1f}" height="{bar * 0.9:.1f}" fill="{_PALETTE[1]}"/>')
        body.append(f'<text x="{PAD + 2}" y="{y + bar * 0.7:.1f}" font-size="8">{escape(labels[i])}</text>')
    Path(path).write_text(_doc(body))


def caterpillar_svg(path, names, mean, lo, hi, title="Posterior means and 95% intervals"):
    mean, lo, hi = (np.asarray(a, dtype=float) for a in (mean, lo, hi))
    n = len(names)
    height = max(H, 30 + 14 * n + PAD)
    left, right = float(np.min(lo)), float(np.max(hi))
    sx = _scale(left, right, 2.5 * PAD, W - PAD / 2)
    body = _axes(title, "value", "", height=height)
    if left < 0 < right:
        body.append(f'<line x1="{sx(0):.1f}" y1="{PAD / 2}" x2="{sx(0):.1f}" y2="{height - PAD}" stroke="#999" stroke-dasharray="4"/>')
    for i, name in enumerate(names):
        y = PAD / 2 + 14 * (i + 1)
        body.append(f'<line x1="{sx(lo[i]):.1f}" y1="{y}" x2="{sx(hi[i]):.1f}" y2="{y}" stroke="#333"/>')
        body.append(f'<circle cx="{sx(mean[i]):.1f}" cy="{y}" r="2.5" fill="#111"/>')
        body.append(f'<text x="4" y="{y + 3}" font-size="8">{escape(name)}</text>')
    Path(path).write_text(_doc(body, height=height))
