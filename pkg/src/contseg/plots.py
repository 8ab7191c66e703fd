"""Hand-rolled SVG line plots for experiment results.

No plotting dependency: the output must be byte-deterministic for the
reproducibility checks, and a couple of polylines plus axis ticks are
easy enough to emit directly. Each series contributes a solid line
(panoptic quality) and a dashed one (mean IoU), both averaged over the
classes evaluated at each step.
"""

from __future__ import annotations

import csv
from pathlib import Path

from .errors import ConfigError

SERIES_COLORS = ("#1f6fb4", "#d0482d", "#2c8a4b", "#8a56c4", "#b58a1f", "#3aa0a8")

_WIDTH, _HEIGHT = 640, 360
_LEFT, _RIGHT, _TOP, _BOTTOM = 54.0, 452.0, 24.0, 316.0


def series_from_reports(reports, tasks) -> dict:
    """Per-step mean PQ and mean IoU from in-memory step reports."""
    steps, pq, miou = [], [], []
    for task, report in zip(tasks, reports):
        values = [report.per_class[c] for c in task.seen_classes
                  if c in report.per_class]
        steps.append(report.step)
        pq.append(sum(v.pq for v in values) / len(values) if values else 0.0)
        miou.append(sum(v.iou for v in values) / len(values) if values else 0.0)
    return {"steps": steps, "pq": pq, "miou": miou}


def series_from_run_dir(run_dir: str | Path) -> dict:
    """Per-step means recovered from a run directory's steps.csv."""
    rows_by_step: dict[int, list[tuple[float, float]]] = {}
    with open(Path(run_dir) / "steps.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            rows_by_step.setdefault(int(row["step"]), []).append(
                (float(row["pq"]), float(row["iou"])))
    steps = sorted(rows_by_step)
    return {
        "steps": steps,
        "pq": [sum(r[0] for r in rows_by_step[s]) / len(rows_by_step[s])
               for s in steps],
        "miou": [sum(r[1] for r in rows_by_step[s]) / len(rows_by_step[s])
                 for s in steps],
    }


def collect_series(root: str | Path) -> dict[str, dict]:
    """One series per run found at `root` (itself a run, or a parent)."""
    root = Path(root)
    if (root / "steps.csv").exists():
        return {root.name: series_from_run_dir(root)}
    found = {}
    for child in sorted(root.iterdir()):
        if child.is_dir() and (child / "steps.csv").exists():
            found[child.name] = series_from_run_dir(child)
    if not found:
        raise ConfigError("no steps.csv found under %s" % root)
    return found


def _x_position(step: int, lo: int, hi: int) -> float:
    if hi == lo:
        return (_LEFT + _RIGHT) / 2.0
    return _LEFT + (step - lo) / (hi - lo) * (_RIGHT - _LEFT)


def _y_position(value: float) -> float:
    return _BOTTOM - value * (_BOTTOM - _TOP)


def _polyline(points: list[tuple[float, float]], color: str, dashed: bool) -> str:
    coords = " ".join("%.2f,%.2f" % (x, y) for x, y in points)
    dash = ' stroke-dasharray="6 4"' if dashed else ""
    line = ('<polyline fill="none" stroke="%s" stroke-width="2"%s points="%s"/>'
            % (color, dash, coords))
    fill = "white" if dashed else color
    markers = "".join('<circle cx="%.2f" cy="%.2f" r="3" fill="%s" '
                      'stroke="%s" stroke-width="1.5"/>' % (x, y, fill, color)
                      for x, y in points)
    return line + markers


def plot_curves(series: dict[str, dict], path: str | Path) -> None:
    """Write an SVG with one PQ and one mIoU line per series."""
    if not series:
        raise ConfigError("nothing to plot")
    all_steps = sorted({s for data in series.values() for s in data["steps"]})
    lo, hi = all_steps[0], all_steps[-1]

    parts = ['<svg xmlns="http://www.w3.org/2000/svg" width="%d" height="%d" '
             'viewBox="0 0 %d %d">' % (_WIDTH, _HEIGHT, _WIDTH, _HEIGHT),
             '<rect width="%d" height="%d" fill="white"/>' % (_WIDTH, _HEIGHT),
             '<text x="%.2f" y="16" font-family="sans-serif" font-size="13">'
             'panoptic quality (solid) and mean IoU (dashed) per step</text>'
             % _LEFT]
    for tick in range(6):
        value = tick / 5.0
        y = _y_position(value)
        parts.append('<line x1="%.2f" y1="%.2f" x2="%.2f" y2="%.2f" '
                     'stroke="#cccccc" stroke-width="1"/>'
                     % (_LEFT, y, _RIGHT, y))
        parts.append('<text x="%.2f" y="%.2f" font-family="sans-serif" '
                     'font-size="11" text-anchor="end">%.1f</text>'
                     % (_LEFT - 6, y + 4, value))
    for step in all_steps:
        x = _x_position(step, lo, hi)
        parts.append('<line x1="%.2f" y1="%.2f" x2="%.2f" y2="%.2f" '
                     'stroke="#444444" stroke-width="1"/>'
                     % (x, _BOTTOM, x, _BOTTOM + 4))
        parts.append('<text x="%.2f" y="%.2f" font-family="sans-serif" '
                     'font-size="11" text-anchor="middle">%d</text>'
                     % (x, _BOTTOM + 18, step))
    parts.append('<line x1="%.2f" y1="%.2f" x2="%.2f" y2="%.2f" '
                 'stroke="#444444" stroke-width="1"/>'
                 % (_LEFT, _BOTTOM, _RIGHT, _BOTTOM))
    parts.append('<text x="%.2f" y="%.2f" font-family="sans-serif" '
                 'font-size="12" text-anchor="middle">step</text>'
                 % ((_LEFT + _RIGHT) / 2, _BOTTOM + 36))

    legend_y = _TOP + 8
    for index, name in enumerate(sorted(series)):
        data = series[name]
        color = SERIES_COLORS[index % len(SERIES_COLORS)]
        points = list(zip((_x_position(s, lo, hi) for s in data["steps"]),
                          map(_y_position, data["pq"])))
        parts.append(_polyline(points, color, dashed=False))
        points = list(zip((_x_position(s, lo, hi) for s in data["steps"]),
                          map(_y_position, data["miou"])))
        parts.append(_polyline(points, color, dashed=True))
        parts.append('<line x1="%.2f" y1="%.2f" x2="%.2f" y2="%.2f" '
                     'stroke="%s" stroke-width="3"/>'
                     % (_RIGHT + 14, legend_y, _RIGHT + 38, legend_y, color))
        parts.append('<text x="%.2f" y="%.2f" font-family="sans-serif" '
                     'font-size="11">%s</text>'
                     % (_RIGHT + 44, legend_y + 4, name))
        legend_y += 18
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))
        fh.write("\n")
