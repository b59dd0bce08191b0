"""Dependency-free SVG heatmaps and the plain-text run summary."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

CELL = 28
LEFT = 120
TOP = 90
MASK_STROKE = "#1f1f1f"


def _ramp(v: float) -> str:
    # white at 0, saturated red at 1
    v = min(max(float(v), 0.0), 1.0)
    g = int(round(255 * (1.0 - v)))
    return f"#ff{g:02x}{g:02x}"


def heatmap_svg(normalized, mask, row_labels, col_labels, title: str = "") -> str:
    """Render a normalized (rows x cols) grid; masked cells get a dark outline."""
    normalized = np.asarray(normalized, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    n_rows, n_cols = normalized.shape
    width = LEFT + n_cols * CELL + 20
    height = TOP + n_rows * CELL + 20
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="4" y="16" font-size="13">{escape(title)}</text>')
    for c, name in enumerate(col_labels):
        x = LEFT + c * CELL + CELL / 2
        out.append(f'<text transform="translate({x:g},{TOP - 6}) rotate(-60)">{escape(str(name))}</text>')
    for r, name in enumerate(row_labels):
        y = TOP + r * CELL + CELL / 2 + 4
        out.append(f'<text x="{LEFT - 6}" y="{y:g}" text-anchor="end">{escape(str(name))}</text>')
        for c in range(n_cols):
            x = LEFT + c * CELL
            ytop = TOP + r * CELL
            out.append(
                f'<rect x="{x}" y="{ytop}" width="{CELL}" height="{CELL}" '
                f'fill="{_ramp(normalized[r, c])}" stroke="#dddddd" stroke-width="0.5"/>'
            )
    for r, c in zip(*np.nonzero(mask)):
        x = LEFT + int(c) * CELL + 1.5
        y = TOP + int(r) * CELL + 1.5
        out.append(
            f'<rect x="{x:g}" y="{y:g}" width="{CELL - 3}" height="{CELL - 3}" '
            f'fill="none" stroke="{MASK_STROKE}" stroke-width="3"/>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def format_summary(*, k_star, h_star, cycles, row_entropy, r2_rows, branch_rows, notes=()) -> str:
    """Assemble the summary text from already-computed quantities.

    ``cycles`` is a list of ``(cycle, weakest_prob)``; ``row_entropy`` a list of
    ``(phase, N, H_i, dominant_targets)``; ``r2_rows`` a list of
    ``(phase, split, n, per_dim, mean, status)``; ``branch_rows`` a list of dicts with
    keys ``phase, a, b, runs_a, runs_b, top`` where ``top`` is ``[(feature, gap), ...]``.
    """
    lines = [
        "Phase analysis summary",
        "",
        f"K* = {k_star}",
        f"H_c(K*) = {h_star:.6f} nats",
        "",
        "Per-phase transition entropy:",
    ]
    for p, n, h, dom in row_entropy:
        lines.append(f"  phase {p}: N={n} H={h:.4f} dominant -> {{{', '.join(str(t) for t in dom)}}}")
    lines += ["", "Dominant cycles (by weakest edge):"]
    if not cycles:
        lines.append("  none")
    for i, (cyc, w) in enumerate(cycles, 1):
        path = " -> ".join(str(c) for c in list(cyc) + [cyc[0]])
        lines.append(f"  pattern {i}: {path} (length {len(cyc)}, weakest p={w:.3f})")
    lines += ["", "Surrogate R2:"]
    for p, split, n, per_dim, mean, status in r2_rows:
        if status != "ok":
            lines.append(f"  phase {p} [{split}]: {status} (n={n})")
            continue
        dims = " ".join(f"{v:.3f}" for v in per_dim)
        lines.append(f"  phase {p} [{split}] n={n}: mean {mean:.3f} | {dims}")
    lines += ["", "Branch analysis:"]
    if not branch_rows:
        lines.append("  none")
    for b in branch_rows:
        head = f"  phase {b['phase']} -> {b['a']} vs {b['b']}"
        if b.get("status", "ok") != "ok":
            lines.append(f"{head}: {b['status']}")
            continue
        lines.append(f"{head} (runs {b['runs_a']} / {b['runs_b']})")
        for rank, (name, gap) in enumerate(b["top"], 1):
            lines.append(f"    {rank}. {name}: gap {gap:.4f}")
    if notes:
        lines += ["", "Notes:"] + [f"  {n}" for n in notes]
    return "\n".join(lines) + "\n"
