"""Tiny deterministic SVG plot emitters for report figures.

No plotting library: every byte of output is a pure function of the inputs,
so re-running a pipeline reproduces figures exactly. Figures are intentionally
plain (axis box, data, labels).
"""

from __future__ import annotations

import numpy as np

from .data import CLASS_NAMES

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _svg(width: int, height: int, body: list[str], comment: str | None = None) -> str:
    head = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">'
    ]
    if comment:
        head.append(f"<!-- {comment} -->")
    head.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    return "\n".join(head + body + ["</svg>"]) + "\n"


def _text(x: float, y: float, s: str, size: int = 11, anchor: str = "start",
          color: str = "#333333") -> str:
    return (
        f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" '
        f'font-family="sans-serif" text-anchor="{anchor}" fill="{color}">{s}</text>'
    )


def _axes_box(x0: float, y0: float, x1: float, y1: float) -> str:
    return (
        f'<rect x="{_fmt(x0)}" y="{_fmt(y0)}" width="{_fmt(x1 - x0)}" '
        f'height="{_fmt(y1 - y0)}" fill="none" stroke="#333333"/>'
    )


def roc_svg(
    curves: dict[str, tuple[np.ndarray, np.ndarray]],
    marked_points: dict[str, tuple[float, float]],
    aurocs: dict[str, float],
    comment: str | None = None,
) -> str:
    """One-vs-rest ROC curves with the Youden-optimal point marked."""
    w, h = 480, 420
    x0, y0, x1, y1 = 60, 30, 440, 370

    def px(f):
        return x0 + f * (x1 - x0)

    def py(t):
        return y1 - t * (y1 - y0)

    body = [_axes_box(x0, y0, x1, y1)]
    body.append(
        f'<line x1="{_fmt(px(0))}" y1="{_fmt(py(0))}" x2="{_fmt(px(1))}" '
        f'y2="{_fmt(py(1))}" stroke="#bbbbbb" stroke-dasharray="4 3"/>'
    )
    for i, (name, (fpr, tpr)) in enumerate(sorted(curves.items())):
        color = PALETTE[CLASS_NAMES.index(name) % len(PALETTE)]
        pts = " ".join(f"{_fmt(px(f))},{_fmt(py(t))}" for f, t in zip(fpr, tpr))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        if name in marked_points:
            mf, mt = marked_points[name]
            body.append(
                f'<circle cx="{_fmt(px(mf))}" cy="{_fmt(py(mt))}" r="4" '
                f'fill="none" stroke="{color}" stroke-width="1.5"/>'
            )
        label = f"{name} (AUROC {aurocs.get(name, float('nan')):.3f})"
        body.append(_text(x0 + 10, y0 + 16 + 14 * i, label, color=color))
    body.append(_text((x0 + x1) / 2, h - 12, "false positive rate", anchor="middle"))
    body.append(_text(16, (y0 + y1) / 2, "TPR", anchor="middle"))
    return _svg(w, h, body, comment)


def confusion_svg(mat: np.ndarray, comment: str | None = None) -> str:
    n = mat.shape[0]
    cell = 52
    x0, y0 = 110, 60
    w, h = x0 + n * cell + 30, y0 + n * cell + 50
    vmax = max(1, int(mat.max()))
    body = []
    for i in range(n):
        for j in range(n):
            v = int(mat[i, j])
            shade = 255 - int(200 * v / vmax)
            fill = f"rgb({shade},{shade},255)"
            x, y = x0 + j * cell, y0 + i * cell
            body.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="{fill}" stroke="#666666"/>'
            )
            body.append(_text(x + cell / 2, y + cell / 2 + 4, str(v), anchor="middle"))
    for i, name in enumerate(CLASS_NAMES):
        body.append(_text(x0 - 8, y0 + i * cell + cell / 2 + 4, name, anchor="end"))
        body.append(_text(x0 + i * cell + cell / 2, y0 - 10, name, size=10, anchor="middle"))
    body.append(_text(x0 + n * cell / 2, h - 14, "predicted", anchor="middle"))
    body.append(_text(24, y0 + n * cell / 2, "consensus", anchor="middle"))
    return _svg(w, h, body, comment)


def tsne_svg(coords: np.ndarray, labels: np.ndarray, comment: str | None = None) -> str:
    w, h = 480, 440
    x0, y0, x1, y1 = 40, 30, 440, 400
    c = np.asarray(coords, dtype=np.float64)
    lo = c.min(axis=0)
    hi = c.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    body = [_axes_box(x0, y0, x1, y1)]
    for (cx, cy), lab in zip(c, labels):
        fx = x0 + (cx - lo[0]) / span[0] * (x1 - x0 - 12) + 6
        fy = y1 - ((cy - lo[1]) / span[1] * (y1 - y0 - 12) + 6)
        body.append(
            f'<circle cx="{_fmt(fx)}" cy="{_fmt(fy)}" r="3" '
            f'fill="{PALETTE[int(lab) % len(PALETTE)]}" fill-opacity="0.7"/>'
        )
    for i, name in enumerate(CLASS_NAMES):
        body.append(_text(x0 + 8, y0 + 16 + 14 * i, name, color=PALETTE[i]))
    return _svg(w, h, body, comment)


def ablation_svg(rows: list[dict], comment: str | None = None) -> str:
    """rows: dicts with variant, mean_kld, p_vs_full (None for the full row)."""
    w, h = 460, 340
    x0, y0, x1, y1 = 70, 30, 430, 280
    vmax = max(r["mean_kld"] for r in rows) * 1.2 or 1.0
    n = len(rows)
    slot = (x1 - x0) / n
    body = [_axes_box(x0, y0, x1, y1)]
    for i, r in enumerate(rows):
        bh = r["mean_kld"] / vmax * (y1 - y0)
        bx = x0 + i * slot + slot * 0.2
        body.append(
            f'<rect x="{_fmt(bx)}" y="{_fmt(y1 - bh)}" width="{_fmt(slot * 0.6)}" '
            f'height="{_fmt(bh)}" fill="{PALETTE[i % len(PALETTE)]}"/>'
        )
        body.append(_text(bx + slot * 0.3, y1 + 16, r["variant"], size=10, anchor="middle"))
        body.append(
            _text(bx + slot * 0.3, y1 - bh - 6, f"{r['mean_kld']:.3f}", size=10, anchor="middle")
        )
        p = r.get("p_vs_full")
        if p is not None:
            body.append(
                _text(bx + slot * 0.3, y1 + 32, f"p={p:.2g}", size=9, anchor="middle")
            )
    body.append(_text((x0 + x1) / 2, h - 8, "out-of-fold mean KLD by variant", anchor="middle"))
    return _svg(w, h, body, comment)
