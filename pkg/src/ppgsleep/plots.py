"""Static SVG renderings of the report figures (no plotting dependency).

Every plot's underlying numbers are also emitted as CSV by the CLI, so
these files are conveniences for eyeballing results.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .metrics import AgreementStats, MetricsReport


def _esc(text: str) -> str:
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _heat_color(frac: float) -> str:
    # white -> deep blue ramp
    frac = float(np.clip(frac, 0.0, 1.0))
    r = int(255 - 205 * frac)
    g = int(255 - 175 * frac)
    b = int(255 - 75 * frac)
    return f"rgb({r},{g},{b})"


def write_confusion_svg(path: str | Path, report: MetricsReport) -> Path:
    """Row-normalized confusion heat map with counts."""
    cm = report.confusion
    names = report.class_names
    k = len(names)
    cell = 72
    margin = 90
    width = margin + k * cell + 20
    height = margin + k * cell + 50
    rows = cm.astype(np.float64)
    denom = rows.sum(axis=1, keepdims=True)
    denom[denom == 0] = 1.0
    frac = rows / denom

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="12">',
        f'<text x="{margin + k * cell / 2}" y="24" text-anchor="middle" font-size="14">'
        f"confusion ({_esc(report.task)}-class), n={report.n_epochs} epochs</text>",
    ]
    for i in range(k):
        for j in range(k):
            x = margin + j * cell
            y = margin + i * cell - 40
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="{_heat_color(frac[i, j])}" stroke="#888"/>'
            )
            dark = "#000" if frac[i, j] < 0.6 else "#fff"
            parts.append(
                f'<text x="{x + cell / 2}" y="{y + cell / 2 - 4}" text-anchor="middle" '
                f'fill="{dark}">{int(cm[i, j])}</text>'
            )
            parts.append(
                f'<text x="{x + cell / 2}" y="{y + cell / 2 + 14}" text-anchor="middle" '
                f'fill="{dark}" font-size="10">{100 * frac[i, j]:.1f}%</text>'
            )
    for i, name in enumerate(names):
        parts.append(
            f'<text x="{margin - 8}" y="{margin + i * cell + cell / 2 - 40}" '
            f'text-anchor="end">{_esc(name)}</text>'
        )
        parts.append(
            f'<text x="{margin + i * cell + cell / 2}" y="{margin + k * cell - 24}" '
            f'text-anchor="middle">{_esc(name)}</text>'
        )
    parts.append(
        f'<text x="16" y="{margin + k * cell / 2 - 40}" transform="rotate(-90 16 '
        f'{margin + k * cell / 2 - 40})" text-anchor="middle">reference</text>'
    )
    parts.append(
        f'<text x="{margin + k * cell / 2}" y="{margin + k * cell}" '
        f'text-anchor="middle">prediction</text>'
    )
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path


def write_bland_altman_svg(
    path: str | Path,
    pred: list[float],
    ref: list[float],
    stats: AgreementStats,
    title: str,
) -> Path:
    """Scatter of (mean, difference) pairs with bias and limit lines."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    means = (pred + ref) / 2.0
    diffs = pred - ref
    width, height = 480, 360
    ml, mr, mt, mb = 70, 20, 40, 50
    x_lo, x_hi = float(means.min()), float(means.max())
    pad = 0.05 * (x_hi - x_lo or 1.0)
    x_lo, x_hi = x_lo - pad, x_hi + pad
    y_candidates = np.concatenate([diffs, [stats.loa_low, stats.loa_high]])
    y_lo, y_hi = float(y_candidates.min()), float(y_candidates.max())
    pad = 0.10 * (y_hi - y_lo or 1.0)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(v):
        return ml + (v - x_lo) / (x_hi - x_lo) * (width - ml - mr)

    def sy(v):
        return height - mb - (v - y_lo) / (y_hi - y_lo) * (height - mt - mb)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="13">{_esc(title)}</text>',
        f'<rect x="{ml}" y="{mt}" width="{width - ml - mr}" height="{height - mt - mb}" '
        f'fill="none" stroke="#444"/>',
    ]
    for value, dash, label in [
        (stats.mean_diff, "", f"bias {stats.mean_diff:.2f}"),
        (stats.loa_low, "6,4", f"-1.96 SD {stats.loa_low:.2f}"),
        (stats.loa_high, "6,4", f"+1.96 SD {stats.loa_high:.2f}"),
    ]:
        y = sy(value)
        parts.append(
            f'<line x1="{ml}" y1="{y}" x2="{width - mr}" y2="{y}" stroke="#c33" '
            f'stroke-dasharray="{dash}"/>'
        )
        parts.append(f'<text x="{width - mr - 4}" y="{y - 4}" text-anchor="end">{label}</text>')
    for mval, dval in zip(means, diffs):
        parts.append(f'<circle cx="{sx(mval)}" cy="{sy(dval)}" r="3" fill="#246" opacity="0.7"/>')
    for frac in (0.0, 0.5, 1.0):
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        parts.append(
            f'<text x="{sx(xv)}" y="{height - mb + 16}" text-anchor="middle">{xv:.1f}</text>'
        )
        parts.append(f'<text x="{ml - 6}" y="{sy(yv) + 4}" text-anchor="end">{yv:.1f}</text>')
    parts.append(
        f'<text x="{(ml + width - mr) / 2}" y="{height - 12}" text-anchor="middle">'
        f"mean of prediction and reference</text>"
    )
    parts.append(
        f'<text x="18" y="{(mt + height - mb) / 2}" transform="rotate(-90 18 '
        f'{(mt + height - mb) / 2})" text-anchor="middle">prediction - reference</text>'
    )
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path
