"""SVG trajectory plots from a run's log directory.

Hand-rolled SVG keeps plotting dependency-free and byte-deterministic.
Robots that completed a merge get warm highlight colors, everything else
cool muted ones.
"""

from __future__ import annotations

import json
from pathlib import Path

_HIGHLIGHT = ["#d62728", "#ff7f0e"]  # merging robots
_MUTED = ["#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#17becf", "#7f7f7f", "#bcbd22", "#e377c2"]


def _read_trajectories(log_dir: Path) -> dict[int, list[tuple[float, float]]]:
    out: dict[int, list[tuple[float, float]]] = {}
    for path in sorted(log_dir.glob("trajectory_*.csv")):
        rid = int(path.stem.split("_")[1])
        rows = []
        for line in path.read_text().splitlines()[1:]:
            _, x, y, _ = line.split(",")
            rows.append((float(x), float(y)))
        out[rid] = rows
    return out


def plot_run(log_dir: str | Path, output: str | Path | None = None) -> Path:
    """Render every robot's trajectory into one SVG; returns the output path."""
    log_dir = Path(log_dir)
    trajectories = _read_trajectories(log_dir)
    if not trajectories:
        raise FileNotFoundError(f"no trajectory_*.csv files under {log_dir}")
    merged: set[int] = set()
    metrics_file = log_dir / "metrics.json"
    if metrics_file.exists():
        data = json.loads(metrics_file.read_text())
        merged = {int(k) for k in data.get("merge_completions", {})}

    points = [p for rows in trajectories.values() for p in rows]
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    pad = 0.4
    x0, x1 = min(xs) - pad, max(xs) + pad
    y0, y1 = min(ys) - pad, max(ys) + pad
    scale = 160.0  # pixels per meter
    width = (x1 - x0) * scale
    height = (y1 - y0) * scale

    def to_px(x: float, y: float) -> tuple[float, float]:
        return ((x - x0) * scale, (y1 - y) * scale)  # flip y for SVG

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
        f'height="{height:.0f}" viewBox="0 0 {width:.1f} {height:.1f}">',
        f'<rect width="{width:.1f}" height="{height:.1f}" fill="#fafafa"/>',
    ]
    highlight_iter = iter(_HIGHLIGHT * 4)
    muted_iter = iter(_MUTED * 8)
    for rid in sorted(trajectories):
        rows = trajectories[rid]
        color = next(highlight_iter) if rid in merged else next(muted_iter)
        pts = " ".join(f"{px:.1f},{py:.1f}" for px, py in (to_px(x, y) for x, y in rows))
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="2" opacity="0.85"><title>robot {rid}</title></polyline>'
        )
        sx, sy = to_px(*rows[0])
        ex, ey = to_px(*rows[-1])
        parts.append(f'<circle cx="{sx:.1f}" cy="{sy:.1f}" r="4" fill="{color}"/>')
        parts.append(
            f'<circle cx="{ex:.1f}" cy="{ey:.1f}" r="5" fill="none" '
            f'stroke="{color}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{sx + 6:.1f}" y="{sy - 6:.1f}" font-size="12" '
            f'fill="{color}">{rid}</text>'
        )
    parts.append("</svg>")
    out_path = Path(output) if output else log_dir / "trajectories.svg"
    out_path.write_text("\n".join(parts))
    return out_path
